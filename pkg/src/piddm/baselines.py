"""Guidance and training baselines: DPS, ECI, PIDM, D-Flow and plain sampling.

All samplers integrate ``t`` from 1 down to 0 with ``x <- x - v dt`` and
count one network evaluation per batched velocity call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import backward
from .diffusion import (
    NfeCounter,
    TeacherModel,
    VelocityField,
    euler_sample,
    fm_loss,
    interpolate,
    posterior_coefficients,
    target_velocity,
    draw_times,
    train_velocity_model,
)
from .fields import RngSource, apply_mask
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

METHODS = ("vanilla", "dps", "eci", "dflow", "pidm")


@dataclass
class GuidanceConfig:
    method: str = "vanilla"
    weight: float = 0.0
    dflow_iters: int = 0
    n_steps: int = 100
    decay: bool = False          # scale weight by (1 - t) to damp early guidance
    observation: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.weight < 0:
            raise ValueError("guidance weight must be non-negative")
        if self.dflow_iters < 0:
            raise ValueError("dflow_iters must be non-negative")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    def weight_at(self, t: float) -> float:
        return self.weight * (1.0 - t) if self.decay else self.weight


class ObservationObjective:
    """``mean_M (x - obs)^2 + lam * ||R(x)||^2`` per sample.

    The data term averages over observed entries so its scale does not grow
    with the number of observations. With ``op=None`` only the data term is
    used; with an all-zero mask only the residual term remains.
    """

    def __init__(self, observation=None, mask=None, op=None, lam: float = 1.0):
        self.obs = None if observation is None else np.asarray(observation, dtype=float)
        self.mask = None if mask is None else np.asarray(mask, dtype=float)
        self.op = op
        self.lam = float(lam)

    def value_and_grad(self, X):
        X = np.atleast_2d(X)
        val = np.zeros(X.shape[0])
        G = np.zeros_like(X)
        if self.mask is not None and self.mask.sum() > 0:
            n_obs = self.mask.sum()
            r = (X - self.obs) * self.mask
            val += np.sum(r * r, axis=1) / n_obs
            G += 2.0 * r / n_obs
        if self.op is not None and self.lam > 0:
            v, g = self.op.value_and_grad(X)
            val += self.lam * v
            G += self.lam * g
        return val, G


# --------------------------------------------------------------- steps


def _euler(x, v, dt):
    return x - v * dt


def dps_step(model: VelocityField, x_t, t, dt, objective, weight, counter: NfeCounter | None = None):
    """Euler step minus ``weight * grad_{x_t} L(posterior_mean(x_t))``.

    The gradient flows through the velocity network via its pullback.
    Non-finite gradients skip the guidance for that step.
    """
    if weight < 0:
        raise ValueError("weight must be non-negative")
    x_t = np.asarray(x_t, dtype=float)
    v, pull = model.forward(x_t, t)
    if counter is not None:
        counter.add()
    x_next = _euler(x_t, v, dt)
    if weight == 0 or objective is None:
        return x_next
    cx, cv = posterior_coefficients(model.schedule, t)
    x0 = cx * x_t - cv * v
    _, g = objective.value_and_grad(x0)
    g = np.asarray(g).reshape(x_t.shape)
    if not np.any(g):
        return x_next
    grad = cx * g - cv * pull(g)
    if counter is not None:
        counter.add_backward()
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite DPS gradient at t=%.4f; guidance skipped", t)
        return x_next
    return x_next - weight * grad


def eci_step(model: VelocityField, x_t, t, dt, observation=None, mask=None,
             counter: NfeCounter | None = None, correction=None):
    """Deterministic step that re-noises the corrected posterior mean.

    ``x_{t-dt} = alpha(t-dt) C(x_hat) + sigma(t-dt) eps_hat`` with
    ``eps_hat = (x_t - alpha(t) x_hat) / sigma(t)``. ``C`` overwrites the
    observed entries, or is the callable ``correction`` when given. Without
    either this is the plain Euler step.
    """
    if dt > t + 1e-12:
        raise ValueError("dt must not exceed t")
    x_t = np.asarray(x_t, dtype=float)
    v, _ = model.forward(x_t, t)
    if counter is not None:
        counter.add()
    if mask is None and correction is None:
        return _euler(x_t, v, dt)
    sched = model.schedule
    cx, cv = posterior_coefficients(sched, t)
    x0 = cx * x_t - cv * v
    if correction is not None:
        corrected = correction(x0)
    else:
        mask = np.asarray(mask)
        if mask.shape[-1] != x_t.shape[-1]:
            raise ValueError("mask and sample lengths differ")
        corrected = apply_mask(x0, np.broadcast_to(observation, x0.shape), np.broadcast_to(mask, x0.shape))
    s = max(t - dt, 0.0)
    if s == 0.0:
        return corrected
    eps_hat = (x_t - sched.alpha(t) * x0) / sched.sigma(t)
    return sched.alpha(s) * corrected + sched.sigma(s) * eps_hat


def line_projection(i: int = 0, j: int = 1):
    """Correction onto ``x_i == x_j`` (both replaced by their average)."""

    def project(x):
        x = np.array(x, dtype=float)
        m = 0.5 * (x[..., i] + x[..., j])
        x[..., i] = m
        x[..., j] = m
        return x

    return project


# ------------------------------------------------------------ samplers


def _steps(n_steps):
    return [(k / n_steps) for k in range(n_steps, 0, -1)]


def sample_dps(model, eps, n_steps, objective, weight, counter=None, decay=False):
    x = np.array(eps, dtype=float)
    dt = 1.0 / n_steps
    for t in _steps(n_steps):
        w = weight * (1.0 - t) if decay else weight
        x = dps_step(model, x, t, dt, objective, w, counter)
    return x


def sample_eci(model, eps, n_steps, observation=None, mask=None, counter=None, correction=None):
    x = np.array(eps, dtype=float)
    dt = 1.0 / n_steps
    for t in _steps(n_steps):
        x = eci_step(model, x, t, dt, observation, mask, counter, correction)
    return x


def guided_sample(model, eps, config: GuidanceConfig, op=None, lam: float = 1.0,
                  counter: NfeCounter | None = None, rng: RngSource | None = None):
    """Dispatch to the sampler named by ``config.method``.

    ``pidm`` models are sampled like vanilla ones (the difference is in
    training).
    """
    m = config.method
    if m in ("vanilla", "pidm"):
        return euler_sample(model, eps, config.n_steps, counter)
    if m == "dps":
        obj = ObservationObjective(config.observation, config.mask, op, lam)
        return sample_dps(model, eps, config.n_steps, obj, config.weight, counter, config.decay)
    if m == "eci":
        return sample_eci(model, eps, config.n_steps, config.observation, config.mask, counter)
    obj = ObservationObjective(config.observation, config.mask, op, lam)
    return dflow_optimize(model, eps, config.n_steps, config.dflow_iters, obj,
                          lr=config.weight or 1e-2, counter=counter)


# ------------------------------------------------------------ PIDM training


def pidm_loss(model: TeacherModel, batch, residual_op, lam, rng: RngSource | None = None,
              t=None, eps=None, return_parts=False):
    """Flow-matching loss plus ``lam * mean ||R(x_hat)||^2`` on the posterior mean."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return fm_loss(model, batch, rng, t, eps, return_parts)
    X0 = np.atleast_2d(np.asarray(batch, dtype=float))
    if X0.shape[0] == 0:
        raise ValueError("empty batch")
    n = X0.shape[0]
    sched = model.schedule
    if t is None:
        t = draw_times(sched, n, rng)
    if eps is None:
        eps = rng.normal(X0.shape)
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    xt = interpolate(sched, X0, eps, t)
    target = target_velocity(sched, X0, eps, t)
    v, tape = model.forward_tape(xt, t)
    diff = v - target
    fm = float(np.sum(diff * diff) / n)
    cx, cv = posterior_coefficients(sched, t[:, None])
    x0 = cx * xt - cv * v
    vals, G = residual_op.value_and_grad(x0)
    phys = float(np.mean(vals))
    up = 2.0 * diff / n - lam * cv * G / n
    grad = backward(tape, up, need_input=False)[0]
    loss = fm + lam * phys
    if return_parts:
        return loss, grad, {"diffusion": fm, "physics": phys}
    return loss, grad


def train_pidm(model: TeacherModel, dataset, residual_op, lam=10.0, iters=1000, batch_size=128,
               lr=1e-3, rng: RngSource | None = None):
    """Train with the residual-augmented loss; the trace records the diffusion term."""
    rng = rng or RngSource(0)
    data = np.atleast_2d(np.asarray(dataset, dtype=float))

    def loss_fn(m, idx, r):
        return pidm_loss(m, data[idx], residual_op, lam, r, return_parts=True)

    return train_velocity_model(model, data, iters, batch_size, lr, rng, loss_fn)


# ------------------------------------------------------------ D-Flow

GRAD_CLIP = 1e6


def _trajectory_grad(model, eps, n_steps, objective, counter):
    """Run the sampler, then backpropagate ``sum L(x0)`` to the initial noise."""
    x = np.array(eps, dtype=float)
    dt = 1.0 / n_steps
    pulls = []
    for t in _steps(n_steps):
        v, pull = model.forward(x, t)
        if counter is not None:
            counter.add()
        pulls.append(pull)
        x = _euler(x, v, dt)
    vals, g = objective.value_and_grad(x)
    g = np.asarray(g).reshape(x.shape)
    for pull in reversed(pulls):
        g = g - dt * pull(g)
        if counter is not None:
            counter.add_backward()
    return x, float(np.sum(vals)), g


def dflow_objective(model, n_steps, objective, counter=None):
    """``eps -> (sum_b L(sample(eps_b)), grad)`` for gradient checks and optimizers."""

    def f(eps):
        _, val, g = _trajectory_grad(model, eps, n_steps, objective, counter)
        return val, g

    return f


def dflow_optimize(model: VelocityField, eps_init, n_steps: int, n_iters: int, objective,
                   lr: float = 1e-2, optimizer: str = "adam", counter: NfeCounter | None = None,
                   return_history=False):
    """Optimise the initial noise through the full sampling trajectory.

    Each of the ``n_iters`` iterations runs one trajectory (``n_steps``
    forward evaluations) and one adjoint pass. The sample returned is the
    one produced by the last trajectory, so ``n_iters - 1`` noise updates are
    applied; ``n_iters = 0`` is plain sampling.
    """
    if n_iters < 0:
        raise ValueError("n_iters must be non-negative")
    if optimizer not in ("adam", "gd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if n_iters == 0:
        return euler_sample(model, eps_init, n_steps, counter)
    eps = np.array(eps_init, dtype=float)
    state = AdamState(lr=lr)
    history = []
    x = None
    for it in range(n_iters):
        x, val, g = _trajectory_grad(model, eps, n_steps, objective, counter)
        history.append(val)
        if it == n_iters - 1:
            break
        norms = np.linalg.norm(np.atleast_2d(g), axis=1)
        if np.any(norms > GRAD_CLIP):
            log.warning("D-Flow gradient norm %.3g clipped to %.0g", norms.max(), GRAD_CLIP)
            scale = np.minimum(1.0, GRAD_CLIP / np.maximum(norms, 1e-300))
            g = (np.atleast_2d(g) * scale[:, None]).reshape(eps.shape)
        if optimizer == "adam":
            eps = adam_step(state, eps.ravel(), g.ravel()).reshape(eps.shape)
        else:
            eps = eps - lr * g
    return (x, history) if return_history else x
