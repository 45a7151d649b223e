"""Analytic Mixture-of-Gaussians diffusion and the Jensen's-gap experiments.

A Gaussian mixture stays a Gaussian mixture under ``x_t = alpha x0 + sigma
eps``: component ``k`` becomes ``N(alpha mu_k, alpha^2 Sigma_k + sigma^2 I)``.
Scores, posterior means and probability-flow velocities are therefore exact,
which isolates the effect of guidance from any training error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import kstest, norm

from .diffusion import DiffusionSchedule, NfeCounter, VelocityField, posterior_coefficients
from .fields import RngSource

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MoGSpec:
    means: np.ndarray            # (K, d)
    covs: np.ndarray             # (K, d, d)
    weights: np.ndarray          # (K,)

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        K, d = means.shape
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim <= 1:  # isotropic variances, one per component
            covs = np.broadcast_to(covs.reshape(-1, 1, 1), (K, 1, 1)) * np.eye(d)
        weights = np.asarray(self.weights, dtype=float)
        if covs.shape != (K, d, d) or weights.shape != (K,):
            raise ValueError("means, covariances and weights disagree in shape")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        for c in covs:
            if np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError("covariances must be positive definite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def component(self, k: int) -> "MoGSpec":
        return MoGSpec(self.means[k : k + 1], self.covs[k : k + 1], np.ones(1))


def latent_line_spec(var: float = 0.04, line_var: float = 1e-6) -> MoGSpec:
    """Two Gaussians on the lines ``x2 = -1`` and ``x2 = +1``.

    The Dirac in the constrained coordinate is replaced by a narrow Gaussian
    of variance ``line_var`` so that scores stay finite.
    """
    cov = np.diag([var, line_var])
    return MoGSpec(np.array([[-1.0, -1.0], [1.0, 1.0]]), np.stack([cov, cov]), np.array([0.5, 0.5]))


def correlated_mog_spec(var: float = 0.04, rho: float = 0.99999) -> MoGSpec:
    cov = var * np.array([[1.0, rho], [rho, 1.0]])
    return MoGSpec(np.array([[-1.0, -1.0], [1.0, 1.0]]), np.stack([cov, cov]), np.array([0.5, 0.5]))


def sample_mog(spec: MoGSpec, n: int, rng: RngSource, return_labels=False):
    u = rng.uniform(n)
    labels = np.searchsorted(np.cumsum(spec.weights), u, side="right").clip(0, spec.n_components - 1)
    L = np.linalg.cholesky(spec.covs)
    z = rng.normal((n, spec.dim))
    x = spec.means[labels] + np.einsum("nij,nj->ni", L[labels], z)
    return (x, labels) if return_labels else x


class _Diffused:
    """Per-time quantities of the diffused mixture."""

    def __init__(self, spec: MoGSpec, sched: DiffusionSchedule, t: float):
        a, s = float(sched.alpha(t)), float(sched.sigma(t))
        d = spec.dim
        self.alpha, self.sig = a, s
        self.m = a * spec.means
        C = a * a * spec.covs + s * s * np.eye(d)
        self.Cinv = np.linalg.inv(C)
        self.logdet = np.linalg.slogdet(C)[1]
        self.gain = a * np.einsum("kij,kjl->kil", spec.covs, self.Cinv)  # alpha Sigma C^-1
        self.spec = spec

    def components(self, X):
        diff = X[:, None, :] - self.m[None]
        sol = np.einsum("kij,bkj->bki", self.Cinv, diff)
        quad = np.sum(diff * sol, axis=2)
        d = self.spec.dim
        logn = -0.5 * quad - 0.5 * self.logdet[None] - 0.5 * d * np.log(2 * np.pi)
        logw = np.log(self.spec.weights)[None] + logn
        lse = logsumexp(logw, axis=1)
        r = np.exp(logw - lse[:, None])
        return diff, -sol, r, lse

    def score(self, X):
        _, sk, r, _ = self.components(X)
        return np.einsum("bk,bki->bi", r, sk)

    def posterior_means(self, diff):
        # E[x0 | x_t, k] = mu_k + alpha Sigma_k C_k^-1 (x - alpha mu_k)
        return self.spec.means[None] + np.einsum("kij,bkj->bki", self.gain, diff)

    def posterior_mean(self, X):
        diff, _, r, _ = self.components(X)
        return np.einsum("bk,bki->bi", r, self.posterior_means(diff))

    def hvp(self, sk, r, s, U):
        """Hessian of log p_t applied to U."""
        CU = np.einsum("kij,bj->bki", self.Cinv, U)
        sku = np.einsum("bki,bi->bk", sk, U)
        out = np.einsum("bk,bki->bi", r, -CU + sk * sku[:, :, None])
        return out - s * np.sum(s * U, axis=1, keepdims=True)


def _batch(x):
    x = np.asarray(x, dtype=float)
    return np.atleast_2d(x), x.ndim == 1


def mog_log_density(spec: MoGSpec, sched: DiffusionSchedule, x, t):
    X, single = _batch(x)
    lse = _Diffused(spec, sched, t).components(X)[3]
    return lse[0] if single else lse


def mog_score(spec: MoGSpec, sched: DiffusionSchedule, x, t):
    """Exact score of the diffused mixture, evaluated in log space."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    X, single = _batch(x)
    s = _Diffused(spec, sched, t).score(X)
    return s[0] if single else s


def mog_posterior_mean(spec: MoGSpec, sched: DiffusionSchedule, x, t):
    """Closed-form ``E[x0 | x_t]`` (responsibility-weighted component means)."""
    X, single = _batch(x)
    m = _Diffused(spec, sched, t).posterior_mean(X)
    return m[0] if single else m


class AnalyticMoGVelocity(VelocityField):
    """Exact probability-flow velocity of a mixture, with exact input VJPs."""

    def __init__(self, spec: MoGSpec, schedule: DiffusionSchedule | None = None):
        self.spec = spec
        self.schedule = schedule or DiffusionSchedule("linear")
        self.fingerprint = f"analytic-mog:{spec.means.tobytes().hex()[:16]}:{self.schedule.kind}"

    def forward(self, x, t):
        X, single = _batch(x)
        sched = self.schedule
        D = _Diffused(self.spec, sched, float(t))
        diff, sk, r, _ = D.components(X)
        s = np.einsum("bk,bki->bi", r, sk)
        mk = D.posterior_means(diff)
        x0 = np.einsum("bk,bki->bi", r, mk)
        da, ds = float(sched.dalpha(t)), float(sched.dsigma(t))
        sig = D.sig
        v = da * x0 - ds * sig * s

        def pullback(up):
            U, _ = _batch(up)
            # d x0 / dx = sum_k r_k alpha Sigma_k C_k^-1 + sum_k mu_hat_k (grad r_k)^T
            gx0 = np.einsum("bk,kji,bj->bi", r, D.gain, U)
            mu_u = np.einsum("bki,bi->bk", mk, U)
            gx0 += np.einsum("bk,bki->bi", r * mu_u, sk - s[:, None, :])
            g = da * gx0 - ds * sig * D.hvp(sk, r, s, U)
            return g[0] if single else g

        return (v[0] if single else v), pullback

    @property
    def width(self) -> int:
        return self.spec.dim

    def score(self, x, t):
        return mog_score(self.spec, self.schedule, x, t)


def gt_conditional_velocity(spec: MoGSpec, sched: DiffusionSchedule, k: int, x, t):
    """Velocity of the flow that transports component ``k`` alone."""
    if not 0 <= k < spec.n_components:
        raise ValueError(f"component {k} out of range")
    return AnalyticMoGVelocity(spec.component(k), sched).velocity(x, t)


def sample_conditional_marginal(spec: MoGSpec, sched: DiffusionSchedule, k, t, rng):
    """Draw ``x_t`` from the diffused component(s) ``k`` (array of labels)."""
    k = np.asarray(k)
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    C = a * a * spec.covs + s * s * np.eye(spec.dim)
    L = np.linalg.cholesky(C)
    z = rng.normal((k.size, spec.dim))
    return a * spec.means[k] + np.einsum("nij,nj->ni", L[k], z)


# ------------------------------------------------------------ guidance


class LatentCodeObjective:
    """Quadratic attraction ``(x[coord] - z)^2`` towards per-sample codes."""

    def __init__(self, codes, coord: int = 1):
        self.codes = np.asarray(codes, dtype=float)
        self.coord = coord

    def value_and_grad(self, X):
        X = np.atleast_2d(X)
        r = X[:, self.coord] - self.codes
        G = np.zeros_like(X)
        G[:, self.coord] = 2.0 * r
        return r * r, G


def dps_velocity(model: VelocityField, objective, x, t, weight, dt):
    """Effective velocity of a DPS step ``x - v dt - weight grad``."""
    v, pull = model.forward(x, t)
    cx, cv = posterior_coefficients(model.schedule, t)
    x0 = cx * x - cv * v
    _, g = objective.value_and_grad(x0)
    grad = cx * g - cv * pull(g)
    return v + weight * grad / dt


@dataclass
class GapReport:
    t: np.ndarray
    mae: np.ndarray
    angular: np.ndarray
    n_excluded: int = 0
    histograms: dict = field(default_factory=dict)

    def rows(self):
        return [(float(t), float(m), float(a)) for t, m, a in zip(self.t, self.mae, self.angular)]


def angular_error(u, v):
    """``1 - cos(theta)`` per row; rows where either vector is zero are NaN."""
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    ok = (nu > 0) & (nv > 0)
    cos = np.full(nu.shape, np.nan)
    cos[ok] = np.sum(u[ok] * v[ok], axis=-1) / (nu[ok] * nv[ok])
    return 1.0 - np.clip(cos, -1.0, 1.0)


def gap_metrics(spec: MoGSpec, sched: DiffusionSchedule, weight: float = 0.035, t_grid=None,
                n_points: int = 2000, rng: RngSource | None = None, n_steps: int = 1000,
                coord: int = 1, conditional=True) -> GapReport:
    """MAE and angular error between DPS and ground-truth conditional velocity.

    Points come from the ground-truth conditional ``p_t(x | k)``. The DPS
    velocity is the analytic marginal velocity plus latent-code guidance
    towards ``mu_k[coord]``, scaled by ``1/dt`` of an ``n_steps`` sampler.
    With ``conditional=False`` the reference is the marginal velocity.
    """
    rng = rng or RngSource(0)
    if t_grid is None:
        t_grid = np.linspace(0.05, 0.95, 19)
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0:
        raise ValueError("empty time grid")
    model = AnalyticMoGVelocity(spec, sched)
    dt = 1.0 / n_steps
    maes, angs = [], []
    excluded = 0
    for t in t_grid:
        k = np.searchsorted(np.cumsum(spec.weights), rng.uniform(n_points), side="right")
        k = k.clip(0, spec.n_components - 1)
        X = sample_conditional_marginal(spec, sched, k, t, rng)
        if conditional:
            v_gt = np.empty_like(X)
            for j in range(spec.n_components):
                sel = k == j
                if sel.any():
                    v_gt[sel] = gt_conditional_velocity(spec, sched, j, X[sel], t)
        else:
            v_gt = model.velocity(X, t)
        obj = LatentCodeObjective(spec.means[k, coord], coord)
        v_dps = dps_velocity(model, obj, X, t, weight, dt)
        maes.append(float(np.mean(np.abs(v_dps - v_gt))))
        ang = angular_error(v_dps, v_gt)
        bad = np.isnan(ang)
        if bad.any():
            excluded += int(bad.sum())
            log.info("t=%.3f: %d zero-norm velocity pairs excluded", t, bad.sum())
        angs.append(float(np.mean(ang[~bad])) if (~bad).any() else 0.0)
    return GapReport(t_grid, np.array(maes), np.array(angs), excluded)


def sample_dps_mog(spec: MoGSpec, n: int, rng: RngSource, weight: float = 0.035,
                   n_steps: int = 1000, coord: int = 1, schedule=None, counter=None):
    """DPS sampling guided towards a random latent code per sample.

    Returns ``(samples, labels)`` where ``labels`` index the requested code.
    """
    from .baselines import dps_step

    sched = schedule or DiffusionSchedule("linear")
    model = AnalyticMoGVelocity(spec, sched)
    labels = np.searchsorted(np.cumsum(spec.weights), rng.uniform(n), side="right")
    labels = labels.clip(0, spec.n_components - 1)
    obj = LatentCodeObjective(spec.means[labels, coord], coord)
    x = rng.normal((n, spec.dim))
    dt = 1.0 / n_steps
    for k in range(n_steps, 0, -1):
        x = dps_step(model, x, k / n_steps, dt, obj, weight, counter=counter)
    return x, labels


def mixture_marginal_cdf(spec: MoGSpec, coord: int):
    mu = spec.means[:, coord]
    sd = np.sqrt(spec.covs[:, coord, coord])
    w = spec.weights

    def cdf(x):
        x = np.asarray(x, dtype=float)[..., None]
        return np.sum(w * norm.cdf((x - mu) / sd), axis=-1)

    return cdf


def marginal_ks(samples, spec: MoGSpec, coord: int) -> float:
    return float(kstest(np.asarray(samples)[:, coord], mixture_marginal_cdf(spec, coord)).statistic)


def off_support_fraction(samples, spec: MoGSpec, coord: int = 1, tol: float = 0.05) -> float:
    """Share of samples farther than ``tol`` from every line ``x[coord] = mu_k``."""
    lines = np.unique(spec.means[:, coord])
    dist = np.min(np.abs(np.asarray(samples)[:, coord, None] - lines[None]), axis=1)
    return float(np.mean(dist > tol))


def histogram_rows(values, bins=60, value_range=None):
    counts, edges = np.histogram(values, bins=bins, range=value_range, density=True)
    return [(float(lo), float(hi), float(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


# ------------------------------------------------------ correlated mixture


@dataclass
class CorrelatedMoGConfig:
    var: float = 0.04
    rho: float = 0.99999
    n_pairs: int = 50_000
    teacher_steps: int = 100
    hidden: tuple = (100, 100)
    lr: float = 1e-3
    batch_size: int = 2048
    epochs: int = 400
    lam_train: float = 1.0
    n_eval: int = 10_000
    refine_iters: int = 80
    refine_lr: float = 3e-3
    refine_tol: float = 1e-7
    lam_infer: float = 1.0
    dps_steps: int = 1000
    dps_weight: float = 300.0
    eci_steps: int = 100
    violation: float = 5e-3
    seed: int = 0


def _deviation_stats(x, spec, violation):
    d = x[:, 0] - x[:, 1]
    return {
        "deviation_std": float(np.std(d)),
        "violation_rate": float(np.mean(np.abs(d) > violation)),
        "max_abs_deviation": float(np.max(np.abs(d))),
        "ks_x1": marginal_ks(x, spec, 1),
    }


def correlated_mog_pipeline(config: CorrelatedMoGConfig | None = None):
    """Constraint ``x0 == x1`` on a nearly degenerate two-component mixture.

    Compares DPS, ECI projection and the distilled student with noise
    refinement. Returns a report dict with per-method statistics, the raw
    samples and histogram rows; a failing stage is recorded under
    ``"errors"`` and the remaining stages still run when possible.
    """
    from .baselines import line_projection, sample_dps, sample_eci
    from .distill import DistillConfig, generate_pairs, train_student
    from .inference import refine_noise
    from .pde import CoordinateDifferenceOperator

    cfg = config or CorrelatedMoGConfig()
    rng = RngSource(cfg.seed)
    spec = correlated_mog_spec(cfg.var, cfg.rho)
    sched = DiffusionSchedule("linear")
    teacher = AnalyticMoGVelocity(spec, sched)
    op = CoordinateDifferenceOperator(2, 0, 1)
    eps = rng.child("eval").normal((cfg.n_eval, 2))
    report = {"config": cfg, "methods": {}, "samples": {}, "nfe": {}, "errors": {}}

    def record(name, x, nfe):
        report["samples"][name] = x
        report["methods"][name] = _deviation_stats(x, spec, cfg.violation)
        report["nfe"][name] = nfe

    try:
        pairs = generate_pairs(teacher, cfg.n_pairs, cfg.teacher_steps, rng.child("pairs"))
        dcfg = DistillConfig(lam=cfg.lam_train, epochs=cfg.epochs, refresh_interval=max(cfg.epochs, 1),
                             pairs_per_refresh=cfg.n_pairs, batch_size=cfg.batch_size, lr=cfg.lr,
                             hidden=cfg.hidden, early_stop=False)
        student = train_student(None, op, dcfg, rng.child("student"), pairs=pairs)
        report["student_history"] = student.history
        record("piddm_1", student(eps), 1)
        counter = NfeCounter()
        x = refine_noise(student, eps, op, cfg.refine_iters, cfg.refine_lr, "lbfgs", counter,
                         tolerance_grad=cfg.refine_tol)
        record("piddm_ref", x, counter.count)
    except (FloatingPointError, ValueError) as exc:
        report["errors"]["piddm"] = str(exc)
        log.error("student stage failed: %s", exc)

    try:
        counter = NfeCounter()
        x = sample_dps(teacher, eps, cfg.dps_steps, op, cfg.dps_weight, counter)
        record("dps", x, counter.count)
    except FloatingPointError as exc:
        report["errors"]["dps"] = str(exc)

    counter = NfeCounter()
    x = sample_eci(teacher, eps, cfg.eci_steps, counter=counter, correction=line_projection(0, 1))
    record("eci", x, counter.count)

    counter = NfeCounter()
    from .diffusion import euler_sample

    record("vanilla", euler_sample(teacher, eps, cfg.teacher_steps, counter), counter.count)
    ref = sample_mog(spec, cfg.n_eval, rng.child("reference"))
    report["samples"]["reference"] = ref
    report["histograms"] = {
        name: {
            "x1": histogram_rows(x[:, 1], 60, (-2.0, 2.0)),
            "deviation": histogram_rows(x[:, 0] - x[:, 1], 60, (-0.03, 0.03)),
        }
        for name, x in report["samples"].items()
    }
    return report
