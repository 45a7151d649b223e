"""Diffusion / flow processes, teacher training and deterministic sampling.

Conventions: ``x_t = alpha(t) x0 + sigma(t) eps`` with data at ``t = 0`` and
noise at ``t = 1``. Velocity models predict ``dx_t/dt`` so sampling runs
``x_{t-dt} = x_t - v(x_t, t) dt`` from ``t = 1`` down to ``t = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamNet, backward, forward
from .fields import RngSource
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

BETA_MIN, BETA_MAX = 0.1, 20.0


@dataclass(frozen=True)
class DiffusionSchedule:
    kind: str = "linear"
    beta_min: float = BETA_MIN
    beta_max: float = BETA_MAX

    def __post_init__(self):
        if self.kind not in ("linear", "vp", "subvp"):
            raise ValueError(f"unknown schedule {self.kind!r}")

    @property
    def t_min(self) -> float:
        """Smallest training time; VP/sub-VP velocities blow up at t = 0."""
        return 0.0 if self.kind == "linear" else 1e-3

    def _beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def _log_alpha(self, t):
        return -0.5 * (self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)

    def alpha(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return 1.0 - t
        return np.exp(self._log_alpha(t))

    def sigma(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return t
        a2 = np.exp(2 * self._log_alpha(t))
        if self.kind == "vp":
            return np.sqrt(1.0 - a2)
        return 1.0 - a2

    def dalpha(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return -np.ones_like(t)
        return -0.5 * self._beta(t) * self.alpha(t)

    def dsigma(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return np.ones_like(t)
        a = self.alpha(t)
        if self.kind == "vp":
            with np.errstate(divide="ignore"):
                return 0.5 * self._beta(t) * a * a / self.sigma(t)
        return self._beta(t) * a * a

    def coefficients(self, t):
        return self.alpha(t), self.sigma(t), self.dalpha(t), self.dsigma(t)


def _col(t, n):
    """Broadcast a scalar or length-n time array to a column."""
    return np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (n, 1))


@dataclass
class NfeCounter:
    """Network forward evaluations; a batched call counts once per trajectory."""

    count: int = 0
    backward: int = 0

    def add(self, n: int = 1) -> None:
        self.count += int(n)

    def add_backward(self, n: int = 1) -> None:
        self.backward += int(n)


class VelocityField:
    """Interface shared by learned teachers and analytic velocity fields.

    ``forward(x, t)`` returns ``(v, pullback)`` where ``pullback(upstream)``
    gives the vector-Jacobian product with respect to ``x``.
    """

    schedule: DiffusionSchedule

    def forward(self, x, t):
        raise NotImplementedError

    def velocity(self, x, t):
        return self.forward(x, t)[0]

    __call__ = velocity


class TeacherModel(VelocityField):
    def __init__(self, net: ParamNet, schedule: DiffusionSchedule | None = None):
        if net.time_pairs == 0:
            raise ValueError("teacher networks need a time embedding")
        if net.out_width != net.in_width:
            raise ValueError("teacher output width must equal its data width")
        self.net = net
        self.schedule = schedule or DiffusionSchedule("linear")

    @classmethod
    def create(cls, width, rng, hidden=(256, 256), schedule="linear", activation="relu",
               time_pairs=16):
        sizes = [width + 2 * time_pairs, *hidden, width]
        net = ParamNet.init(sizes, rng, activation, time_pairs, out_scale=0.1)
        return cls(net, DiffusionSchedule(schedule))

    @property
    def width(self) -> int:
        return self.net.in_width

    def forward(self, x, t):
        v, tape = forward(self.net, x, t)
        return v, lambda up: backward(tape, up, need_params=False)[1]

    def forward_tape(self, x, t):
        return forward(self.net, x, t)

    def copy(self) -> "TeacherModel":
        return TeacherModel(self.net.copy(), self.schedule)


def velocity_from_score(sched: DiffusionSchedule, x, t, score):
    """Probability-flow velocity ``E[alpha' x0 + sigma' eps | x_t]`` from the score."""
    a, s, da, ds = sched.coefficients(t)
    x0_hat = (x + s * s * score) / a
    eps_hat = -s * score
    return da * x0_hat + ds * eps_hat


def posterior_coefficients(sched: DiffusionSchedule, t):
    """``(c_x, c_v)`` with ``E[x0 | x_t] = c_x x_t - c_v v(x_t, t)``."""
    a, s, da, ds = sched.coefficients(t)
    den = ds * a - s * da
    return ds / den, s / den


def posterior_mean(model: VelocityField, x_t, t, counter: NfeCounter | None = None,
                   velocity=None):
    """Tweedie posterior mean recovered from the velocity prediction.

    For the linear schedule this is ``x_t - t v(x_t, t)``; at ``t = 0`` the
    input is returned unchanged.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    x_t = np.asarray(x_t, dtype=float)
    if t == 0.0:
        return x_t.copy()
    if velocity is None:
        velocity = model.velocity(x_t, t)
        if counter is not None:
            counter.add()
    cx, cv = posterior_coefficients(model.schedule, t)
    return cx * x_t - cv * velocity


def interpolate(sched: DiffusionSchedule, x0, eps, t):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps must have the same shape")
    if t_arr.ndim == 0:
        return sched.alpha(t_arr) * x0 + sched.sigma(t_arr) * eps
    tc = _col(t_arr, x0.shape[0])
    return sched.alpha(tc) * x0 + sched.sigma(tc) * eps


def target_velocity(sched: DiffusionSchedule, x0, eps, t):
    tc = _col(t, x0.shape[0])
    return sched.dalpha(tc) * x0 + sched.dsigma(tc) * eps


def draw_times(sched: DiffusionSchedule, n, rng: RngSource):
    return rng.uniform(n, sched.t_min, 1.0)


def fm_loss(model: TeacherModel, batch, rng: RngSource | None = None, t=None, eps=None,
            return_parts=False):
    """Flow-matching loss ``mean_b ||v(x_t, t) - (alpha' x0 + sigma' eps)||^2``.

    Returns ``(loss, grad)`` with the gradient taken over the flat network
    parameters. ``t`` and ``eps`` may be pinned for reproducible checks.
    """
    X0 = np.atleast_2d(np.asarray(batch, dtype=float))
    if X0.shape[0] == 0:
        raise ValueError("empty batch")
    n = X0.shape[0]
    if t is None:
        t = draw_times(model.schedule, n, rng)
    if eps is None:
        eps = rng.normal(X0.shape)
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    xt = interpolate(model.schedule, X0, eps, t)
    target = target_velocity(model.schedule, X0, eps, t)
    v, tape = model.forward_tape(xt, t)
    diff = v - target
    loss = float(np.sum(diff * diff) / n)
    grad = backward(tape, 2.0 * diff / n, need_input=False)[0]
    if return_parts:
        return loss, grad, {"diffusion": loss}
    return loss, grad


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def train_velocity_model(model: TeacherModel, data, iters, batch_size, lr, rng: RngSource,
                         loss_fn=None, trace_key="diffusion"):
    """Adam loop shared by teacher, PIDM and reflow training.

    ``loss_fn(model, batch_indices, rng)`` returns ``(loss, grad, parts)``.
    Returns the model and the trace of ``parts[trace_key]`` per iteration.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if loss_fn is None:
        loss_fn = lambda m, idx, r: fm_loss(m, data[idx], r, return_parts=True)
    state = AdamState(lr=lr)
    trace = []
    params = model.net.params
    for it in range(int(iters)):
        idx = rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))
        loss, grad, parts = loss_fn(model, idx, rng)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}", trace)
        params = adam_step(state, params, grad)
        model.net.params = params
        trace.append(parts[trace_key])
    return model, trace


def train_teacher(model: TeacherModel, dataset, iters=1000, batch_size=128, lr=1e-3,
                  rng: RngSource | None = None):
    """Adam-train a velocity model on ``dataset`` rows; returns ``(model, trace)``."""
    rng = rng or RngSource(0)
    return train_velocity_model(model, dataset, iters, batch_size, lr, rng)


def euler_sample(model: VelocityField, eps, n_steps: int = 100,
                 counter: NfeCounter | None = None, return_trajectory=False):
    """Integrate the reverse ODE from ``t = 1`` to ``t = 0`` with ``dt = 1/n_steps``."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    x = np.array(eps, dtype=float)
    dt = 1.0 / n_steps
    traj = [x.copy()] if return_trajectory else None
    for k in range(n_steps, 0, -1):
        v = model.velocity(x, k / n_steps)
        if counter is not None:
            counter.add()
        x = x - v * dt
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at t={k / n_steps}")
        if return_trajectory:
            traj.append(x.copy())
    if return_trajectory:
        return x, np.stack(traj)
    return x
