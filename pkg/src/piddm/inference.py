"""Noise-space inference with a one-step student.

``refine_noise`` lowers the residual of generated samples by optimising the
input noise. ``solve_conditional`` handles forward, inverse and
reconstruction problems: observed entries are pasted into the student output
before the residual is evaluated, so they hold exactly in the result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward
from .diffusion import NfeCounter
from .fields import Layout, RngSource, apply_mask, validate_mask
from .optim import lbfgs_minimize_batched

log = logging.getLogger(__name__)

TASKS = ("simulate", "forward", "inverse", "reconstruct")


def make_mask(task: str, layout: Layout, rng: RngSource | None = None, rate: float = 0.2,
              boundary: bool = True) -> np.ndarray:
    """Observation mask for a task on a joint ``(u, a)`` layout.

    forward: the whole coefficient block, plus the initial row and the left
    boundary column of ``u`` (all four edges for static problems).
    inverse: the whole solution block. reconstruct: each entry observed with
    probability ``rate``. simulate: nothing observed.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    m = np.zeros(layout.width)
    if task == "forward":
        m[layout.a_slice] = 1.0
        if boundary:
            B = np.zeros(layout.grid.shape)
            B[0, :] = 1.0
            B[:, 0] = 1.0
            if layout.grid.n_t > 1 and layout.coef == "field":
                B[-1, :] = 1.0
                B[:, -1] = 1.0
            m[layout.u_slice] = B.ravel()
    elif task == "inverse":
        m[layout.u_slice] = 1.0
    elif task == "reconstruct":
        rng = rng or RngSource(0)
        m = (rng.uniform(layout.width) < rate).astype(float)
    return m


@dataclass
class TaskSpec:
    task: str
    observation: np.ndarray
    mask: np.ndarray
    lam: float = 1.0
    n_iters: int = 80
    optimizer: str = "lbfgs"
    lr: float = 1.0
    restarts: int = 1
    hard_constraint: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.optimizer not in ("gd", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.n_iters < 0 or self.lam < 0:
            raise ValueError("n_iters and lam must be non-negative")
        if not 1 <= self.restarts <= 8:
            raise ValueError("restarts must lie in [1, 8]")
        self.observation = np.asarray(self.observation, dtype=float).reshape(-1)
        self.mask = validate_mask(self.mask, self.observation.size)


@dataclass
class InferenceResult:
    x: np.ndarray
    eps: np.ndarray
    objective: np.ndarray        # per-sample final objective
    nfe: int
    n_iters: int
    flagged: bool = False
    trace: list = field(default_factory=list)


def _objective(student, residual_op, lam, observation=None, mask=None, hard=True, counter=None):
    """``eps -> (per-sample values, output, gradient)`` for the noise objective."""

    def f(E):
        x, tape = student.forward_tape(E)
        if counter is not None:
            counter.add()
        G = np.zeros_like(x)
        val = np.zeros(x.shape[0])
        if mask is not None and mask.any():
            r = (x - observation) * mask
            val += np.sum(r * r, axis=1)
            G += 2.0 * r
        if residual_op is not None and lam > 0:
            xr = apply_mask(x, np.broadcast_to(observation, x.shape), np.broadcast_to(mask, x.shape)) \
                if (hard and mask is not None) else x
            rv, rg = residual_op.value_and_grad(xr)
            if hard and mask is not None:
                rg = rg * (1.0 - mask)  # observed entries are constants in the mixed sample
            val += lam * rv
            G += lam * rg
        g = backward(tape, G, need_params=False)[1]
        return val, x, g

    return f


def _optimise(f, eps0, n_iters, optimizer, lr, state_kw):
    E = np.atleast_2d(np.array(eps0, dtype=float))
    trace = []
    flagged = False
    if n_iters == 0:
        return E, trace, flagged, 0
    if optimizer == "gd":
        for it in range(n_iters):
            val, _, g = f(E)
            trace.append(float(np.sum(val)))
            if not np.all(np.isfinite(g)):
                log.warning("non-finite noise gradient at iteration %d; stopping", it)
                return E, trace, True, it
            E = E - lr * g
        return E, trace, flagged, n_iters

    def rows(z):
        val, _, g = f(z)
        return val, g

    # every sample owns its noise, so each row gets its own L-BFGS run
    res = lbfgs_minimize_batched(rows, E, max_iters=n_iters, lr=lr, fallback=True, **state_kw)
    if not np.all(np.isfinite(res.x)):
        return E, res.trace, True, int(res.n_iters.max())
    return res.x, res.trace, bool(res.line_search_failed.any()), int(res.n_iters.max())


def refine_noise(student, eps, residual_op, n_f: int = 50, lr: float = 1e-2, optimizer: str = "gd",
                 counter: NfeCounter | None = None, tolerance_grad: float = 1e-7,
                 return_info=False):
    """Lower ``||R(d(eps))||^2`` by optimising ``eps``; returns ``d(eps_final)``.

    With gradient descent this costs ``n_f + 1`` student evaluations. Each
    sample is optimised independently; evaluations are batched, and one
    batched call counts as one evaluation.
    """
    if n_f < 0:
        raise ValueError("n_f must be non-negative")
    local = NfeCounter()
    f = _objective(student, residual_op, 1.0, counter=local)
    E, trace, flagged, iters = _optimise(f, eps, n_f, optimizer, lr,
                                         {"tolerance_grad": tolerance_grad})
    x = student.forward_tape(E)[0]
    local.add()
    if counter is not None:
        counter.add(local.count)
    if return_info:
        val = np.atleast_1d(residual_op.norm(x))
        return InferenceResult(x, E, val, local.count, iters, flagged, trace)
    return x


def solve_conditional(student, task: TaskSpec, residual_op, rng: RngSource | None = None,
                      n_samples: int = 1, counter: NfeCounter | None = None, eps_init=None,
                      tolerance_grad: float = 1e-7, return_info=False):
    """Optimise the noise for ``||(d - x')*M||^2 + lam ||R(x_mix)||^2``.

    ``x_mix`` pastes the observation into the student output; the returned
    samples are ``x_mix`` so observed entries match bit for bit. With
    ``task.hard_constraint`` off the residual is taken on the raw output and
    the raw output is returned. Restarts redraw the noise and keep, per
    sample, the run with the lowest objective.
    """
    rng = rng or RngSource(0)
    obs, mask = task.observation, task.mask
    if obs.size != student.width:
        raise ValueError("observation width does not match the student")
    local = NfeCounter()
    f = _objective(student, residual_op, task.lam, obs, mask, task.hard_constraint, local)
    best_val = best_E = None
    trace = []
    flagged = False
    iters = 0
    for r in range(task.restarts):
        if r == 0 and eps_init is not None:
            E0 = np.atleast_2d(np.asarray(eps_init, dtype=float))
        else:
            E0 = rng.normal((n_samples, student.width))
        E, tr, fl, it = _optimise(f, E0, task.n_iters, task.optimizer, task.lr,
                                  {"tolerance_grad": tolerance_grad})
        val, _, _ = f(E)
        trace.append(tr)
        flagged |= fl
        iters += it
        if best_val is None:
            best_val, best_E = val, E
        else:
            better = val < best_val
            best_val = np.where(better, val, best_val)
            best_E = np.where(better[:, None], E, best_E)
    x = student.forward_tape(best_E)[0]
    local.add()
    if task.hard_constraint:
        x = apply_mask(x, np.broadcast_to(obs, x.shape), np.broadcast_to(mask, x.shape))
    if counter is not None:
        counter.add(local.count)
    if return_info:
        return InferenceResult(x, best_E, best_val, local.count, iters, flagged, trace)
    return x
