"""Adam and L-BFGS (strong-Wolfe line search) on flat parameter vectors."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameters."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ValueError("Adam moments do not match the parameter vector")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LbfgsState:
    history_size: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    tolerance_grad: float = 1e-7
    lr: float = 1.0
    max_ls: int = 20
    pairs: deque = field(default_factory=deque)

    def push(self, s, y) -> bool:
        sy = float(s @ y)
        if sy <= 1e-12 * max(1.0, float(y @ y)):
            return False
        self.pairs.append((s, y, 1.0 / sy))
        while len(self.pairs) > self.history_size:
            self.pairs.popleft()
        return True

    def direction(self, g):
        q = -g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return q


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iters: int
    n_evals: int
    converged: bool
    line_search_failed: bool
    trace: list


def _cubic_min(a1, f1, g1, a2, f2, g2, lo, hi):
    """Minimiser of the cubic through two points with slopes, clipped to [lo, hi]."""
    d1 = g1 + g2 - 3 * (f1 - f2) / (a1 - a2)
    sq = d1 * d1 - g1 * g2
    if sq >= 0:
        d2 = np.sqrt(sq) * np.sign(a2 - a1)
        a = a2 - (a2 - a1) * (g2 + d2 - d1) / (g2 - g1 + 2 * d2)
        if np.isfinite(a):
            return min(max(a, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(objective, x, f0, g0, d, a0, c1=1e-4, c2=0.9, max_evals=20):
    """Bracketing/zoom line search.

    Returns ``(alpha, f, g, n_evals, ok)``; ``ok`` is False when no step
    satisfying both strong-Wolfe conditions was found within ``max_evals``.
    """
    dphi0 = float(g0 @ d)
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = objective(x + a * d)
        return float(f), g, float(g @ d)

    def zoom(lo, f_lo, dlo, hi, f_hi, dhi):
        g_lo = None
        while evals < max_evals:
            left, right = min(lo, hi), max(lo, hi)
            a = _cubic_min(lo, f_lo, dlo, hi, f_hi, dhi, left, right)
            span = right - left
            if min(a - left, right - a) < 0.1 * span:
                a = 0.5 * (left + right)
            if span < 1e-16 * max(1.0, right):
                break
            f_a, g_a, d_a = phi(a)
            if f_a > f0 + c1 * a * dphi0 or f_a >= f_lo:
                hi, f_hi, dhi = a, f_a, d_a
            else:
                if abs(d_a) <= -c2 * dphi0:
                    return a, f_a, g_a, True
                if d_a * (hi - lo) >= 0:
                    hi, f_hi, dhi = lo, f_lo, dlo
                lo, f_lo, dlo, g_lo = a, f_a, d_a, g_a
        return lo, f_lo, g_lo, False

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    a = a0
    for i in range(max_evals):
        f_a, g_a, d_a = phi(a)
        if not np.isfinite(f_a):
            a = 0.5 * (a_prev + a)
            continue
        if f_a > f0 + c1 * a * dphi0 or (i > 0 and f_a >= f_prev):
            res = zoom(a_prev, f_prev, d_prev, a, f_a, d_a)
            return (*res[:3], evals, res[3]) if res[3] else (res[0], res[1], res[2], evals, False)
        if abs(d_a) <= -c2 * dphi0:
            return a, f_a, g_a, evals, True
        if d_a >= 0:
            res = zoom(a, f_a, d_a, a_prev, f_prev, d_prev)
            return (*res[:3], evals, res[3]) if res[3] else (res[0], res[1], res[2], evals, False)
        a_next = _cubic_min(a_prev, f_prev, d_prev, a, f_a, d_a, a + 0.01 * (a - a_prev), 10 * a)
        a_prev, f_prev, d_prev = a, f_a, d_a
        a = a_next
        if evals >= max_evals:
            break
    return a_prev, f_prev, None, evals, False


def lbfgs_minimize(state: LbfgsState, objective, init, max_iters: int = 100) -> LbfgsResult:
    """Minimise ``objective(x) -> (f, grad)`` from ``init``.

    Stops after ``max_iters`` accepted steps, when ``max|grad|`` falls below
    ``state.tolerance_grad``, or when the line search fails (flagged).
    """
    x = np.array(init, dtype=float)
    f, g = objective(x)
    f = float(f)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise FloatingPointError("objective is not finite at the initial point")
    n_evals, trace = 1, [f]
    failed = False
    it = 0
    converged = bool(np.max(np.abs(g)) <= state.tolerance_grad) if g.size else True
    while not converged and it < max_iters:
        d = state.direction(g)
        gtd = float(g @ d)
        if gtd > -1e-300:
            state.pairs.clear()
            d = -g
            gtd = float(g @ d)
        a0 = state.lr * min(1.0, 1.0 / np.abs(g).sum()) if not state.pairs else state.lr
        alpha, f_new, g_new, evals, ok = strong_wolfe(
            objective, x, f, g, d, a0, state.c1, state.c2, state.max_ls)
        n_evals += evals
        if not ok or g_new is None:
            failed = True
            log.debug("line search failed at iteration %d", it)
            break
        s = alpha * d
        state.push(s, g_new - g)
        x = x + s
        f, g = float(f_new), g_new
        trace.append(f)
        it += 1
        converged = bool(np.max(np.abs(g)) <= state.tolerance_grad)
    return LbfgsResult(x, f, g, it, n_evals, converged, failed, trace)


def _cubic_min_vec(a1, f1, g1, a2, f2, g2, lo, hi):
    with np.errstate(all="ignore"):
        d1 = g1 + g2 - 3 * (f1 - f2) / (a1 - a2)
        sq = d1 * d1 - g1 * g2
        d2 = np.sqrt(np.maximum(sq, 0.0)) * np.sign(a2 - a1)
        a = a2 - (a2 - a1) * (g2 + d2 - d1) / (g2 - g1 + 2 * d2)
    ok = (sq >= 0) & np.isfinite(a)
    return np.where(ok, np.clip(a, lo, hi), 0.5 * (lo + hi))


def _wolfe_batched(objective, X, f0, G0, D, a0, c1, c2, max_evals, active):
    """Per-row strong-Wolfe search, all rows evaluated together.

    Mirrors :func:`strong_wolfe` row by row. Returns
    ``(alpha, f, G, ok, fallback, n_evals)``. Rows with no strong-Wolfe
    point but a sufficient-decrease point found on the way get that point
    with ``fallback = True``; this happens at kinks of piecewise-smooth
    objectives where the curvature condition cannot hold.
    """
    B = X.shape[0]
    dphi0 = np.sum(G0 * D, axis=1)
    stage = np.where(active, 0, 3)       # 0 bracket, 1 zoom, 2 ok, 3 stopped
    a = a0.copy()
    a_prev = np.zeros(B)
    f_prev, d_prev = f0.copy(), dphi0.copy()
    G_prev = G0.copy()
    lo, f_lo, d_lo, G_lo = np.zeros(B), f0.copy(), dphi0.copy(), G0.copy()
    hi, f_hi, d_hi = np.zeros(B), f0.copy(), dphi0.copy()
    out_a, out_f, out_G = np.zeros(B), f0.copy(), G0.copy()
    first = np.ones(B, dtype=bool)
    evals = 0
    while evals < max_evals and np.any(stage < 2):
        zoom = stage == 1
        left, right = np.minimum(lo, hi), np.maximum(lo, hi)
        az = _cubic_min_vec(lo, f_lo, d_lo, hi, f_hi, d_hi, left, right)
        span = right - left
        az = np.where(np.minimum(az - left, right - az) < 0.1 * span, 0.5 * (left + right), az)
        tiny = zoom & (span < 1e-16 * np.maximum(1.0, right))
        stage = np.where(tiny, 3, stage)
        trial = np.where(stage == 1, az, np.where(stage == 0, a, 0.0))
        f, G = objective(X + trial[:, None] * D)
        f = np.asarray(f, dtype=float)
        evals += 1
        dphi = np.sum(G * D, axis=1)
        armijo_bad = f > f0 + c1 * trial * dphi0
        curv = np.abs(dphi) <= -c2 * dphi0

        # bracketing phase
        b = stage == 0
        nonfin = b & ~np.isfinite(f)
        a = np.where(nonfin, 0.5 * (a_prev + a), a)
        b &= ~nonfin
        to_zoom1 = b & (armijo_bad | (~first & (f >= f_prev)))
        done_b = b & ~to_zoom1 & curv
        to_zoom2 = b & ~to_zoom1 & ~done_b & (dphi >= 0)
        extend = b & ~to_zoom1 & ~done_b & ~to_zoom2
        # zoom between (a_prev, a) or (a, a_prev)
        lo = np.where(to_zoom1, a_prev, np.where(to_zoom2, a, lo))
        f_lo = np.where(to_zoom1, f_prev, np.where(to_zoom2, f, f_lo))
        d_lo = np.where(to_zoom1, d_prev, np.where(to_zoom2, dphi, d_lo))
        G_lo = np.where(to_zoom1[:, None], G_prev, np.where(to_zoom2[:, None], G, G_lo))
        hi = np.where(to_zoom1, a, np.where(to_zoom2, a_prev, hi))
        f_hi = np.where(to_zoom1, f, np.where(to_zoom2, f_prev, f_hi))
        d_hi = np.where(to_zoom1, dphi, np.where(to_zoom2, d_prev, d_hi))
        nxt = _cubic_min_vec(a_prev, f_prev, d_prev, a, f, dphi, a + 0.01 * (a - a_prev), 10 * a)
        a_prev = np.where(extend, a, a_prev)
        f_prev = np.where(extend, f, f_prev)
        d_prev = np.where(extend, dphi, d_prev)
        G_prev = np.where(extend[:, None], G, G_prev)
        a = np.where(extend, nxt, a)
        first = np.where(b, False, first)

        # zoom phase
        z = stage == 1
        z_hi = z & (armijo_bad | (f >= f_lo) | ~np.isfinite(f))
        z_ok = z & ~z_hi & curv
        z_mv = z & ~z_hi & ~z_ok
        flip = z_mv & (dphi * (hi - lo) >= 0)
        hi = np.where(z_hi, trial, np.where(flip, lo, hi))
        f_hi = np.where(z_hi, f, np.where(flip, f_lo, f_hi))
        d_hi = np.where(z_hi, dphi, np.where(flip, d_lo, d_hi))
        lo = np.where(z_mv, trial, lo)
        f_lo = np.where(z_mv, f, f_lo)
        d_lo = np.where(z_mv, dphi, d_lo)
        G_lo = np.where(z_mv[:, None], G, G_lo)

        done = done_b | z_ok
        out_a = np.where(done, trial, out_a)
        out_f = np.where(done, f, out_f)
        out_G = np.where(done[:, None], G, out_G)
        stage = np.where(done, 2, np.where(to_zoom1 | to_zoom2, 1, stage))
    ok = stage == 2
    in_zoom = active & ~ok & (lo > 0) & (f_lo < f0)
    in_bracket = active & (stage == 0) & (a_prev > 0) & (f_prev < f0)
    fb = (in_zoom | in_bracket) & ~ok
    out_a = np.where(in_zoom, lo, np.where(in_bracket, a_prev, out_a))
    out_f = np.where(in_zoom, f_lo, np.where(in_bracket, f_prev, out_f))
    out_G = np.where(in_zoom[:, None], G_lo, np.where(in_bracket[:, None], G_prev, out_G))
    return out_a, out_f, out_G, ok, fb, evals


@dataclass
class BatchLbfgsResult:
    x: np.ndarray
    f: np.ndarray
    grad: np.ndarray
    n_iters: np.ndarray
    n_evals: int
    converged: np.ndarray
    line_search_failed: np.ndarray
    trace: list
    fallbacks: np.ndarray


def lbfgs_minimize_batched(objective, init, max_iters: int = 100, history_size: int = 10,
                           c1: float = 1e-4, c2: float = 0.9, tolerance_grad: float = 1e-7,
                           lr: float = 1.0, max_ls: int = 20,
                           fallback: bool = False) -> BatchLbfgsResult:
    """Independent L-BFGS runs, one per row of ``init``.

    ``objective(X)`` returns per-row values ``(B,)`` and gradients
    ``(B, D)``; row ``b`` of the output may depend only on row ``b`` of the
    input. Every row keeps its own curvature history and line search, so the
    result follows :func:`lbfgs_minimize` on each row separately, while
    network evaluations stay batched. ``n_evals`` counts batched objective
    calls. With ``fallback`` a row whose line search ends without a
    strong-Wolfe point still takes the best sufficient-decrease step seen
    (counted in ``fallbacks``); otherwise that row stops and is flagged.
    """
    X = np.array(init, dtype=float)
    B, D = X.shape
    f, G = objective(X)
    f = np.asarray(f, dtype=float)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(G))):
        raise FloatingPointError("objective is not finite at the initial point")
    m = history_size
    S = np.zeros((B, m, D))
    Y = np.zeros((B, m, D))
    rho = np.zeros((B, m))
    n_pairs = np.zeros(B, dtype=int)
    iters = np.zeros(B, dtype=int)
    failed = np.zeros(B, dtype=bool)
    n_fb = np.zeros(B, dtype=int)
    conv = np.max(np.abs(G), axis=1) <= tolerance_grad
    n_evals = 1
    trace = [float(np.sum(f))]
    for _ in range(max_iters):
        active = ~conv & ~failed
        if not active.any():
            break
        # two-loop recursion over each row's history (newest at the end)
        q = -G.copy()
        alph = np.zeros((B, m))
        for i in range(m - 1, -1, -1):
            alph[:, i] = rho[:, i] * np.sum(S[:, i] * q, axis=1)
            q -= alph[:, i, None] * Y[:, i]
        sy = np.sum(S[:, -1] * Y[:, -1], axis=1)
        yy = np.sum(Y[:, -1] * Y[:, -1], axis=1)
        gamma = np.where(n_pairs > 0, sy / np.where(yy > 0, yy, 1.0), 1.0)
        q *= gamma[:, None]
        for i in range(m):
            beta = rho[:, i] * np.sum(Y[:, i] * q, axis=1)
            q += (alph[:, i] - beta)[:, None] * S[:, i]
        gtd = np.sum(G * q, axis=1)
        reset = gtd > -1e-300
        if reset.any():
            q[reset] = -G[reset]
            S[reset] = 0.0
            Y[reset] = 0.0
            rho[reset] = 0.0
            n_pairs[reset] = 0
        a0 = np.where(n_pairs > 0, lr, lr * np.minimum(1.0, 1.0 / np.maximum(np.abs(G).sum(axis=1), 1e-300)))
        alpha, f_new, G_new, ok, fb, ev = _wolfe_batched(objective, X, f, G, q, a0, c1, c2, max_ls,
                                                         active)
        n_evals += ev
        if fallback:
            n_fb += active & fb
            ok = ok | fb
        failed |= active & ~ok
        step = active & ok
        s = alpha[:, None] * q
        y = G_new - G
        sy = np.sum(s * y, axis=1)
        push = step & (sy > 1e-12 * np.maximum(1.0, np.sum(y * y, axis=1)))
        if push.any():
            S[push] = np.roll(S[push], -1, axis=1)
            Y[push] = np.roll(Y[push], -1, axis=1)
            rho[push] = np.roll(rho[push], -1, axis=1)
            S[push, -1] = s[push]
            Y[push, -1] = y[push]
            rho[push, -1] = 1.0 / sy[push]
            n_pairs[push] = np.minimum(n_pairs[push] + 1, m)
        X = np.where(step[:, None], X + s, X)
        f = np.where(step, f_new, f)
        G = np.where(step[:, None], G_new, G)
        iters += step
        conv = np.max(np.abs(G), axis=1) <= tolerance_grad
        if step.any():
            trace.append(float(np.sum(f)))
    return BatchLbfgsResult(X, f, G, iters, n_evals, conv, failed, trace, n_fb)
