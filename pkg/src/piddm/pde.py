"""Finite-difference PDE residuals and analytical dataset generators.

Every operator maps a flat joint sample ``x = (u, a)`` (or a batch of them)
to a residual vector ``[F[u, a], w * B[u, a]]``. Differential operators are
assembled once as sparse matrices, so the residual and its vector-Jacobian
product share one definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import brentq
from scipy.special import erf

from .fields import Field, GridSpec, JointSample, Layout, RngSource, flatten


def _as_batch(x):
    if isinstance(x, JointSample):
        x = flatten(x)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def _apply(mat, u):
    """``mat @ u`` row-wise for a batch ``u`` of shape (B, n)."""
    return np.asarray((mat @ u.T).T)


def _row(entries, n):
    """Sparse matrix from a list of ``{col: coef}`` rows."""
    rows, cols, vals = [], [], []
    for r, row in enumerate(entries):
        for c, v in row.items():
            rows.append(r)
            cols.append(c)
            vals.append(v)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(entries), n))


def _d1(j, n, h, periodic=False):
    """First-derivative stencil at index ``j`` of an axis of length ``n``."""
    if periodic:
        p = n - 1
        return {(j + 1) % p: 0.5 / h, (j - 1) % p: -0.5 / h}
    if j == 0:
        return {0: -1.5 / h, 1: 2.0 / h, 2: -0.5 / h}
    if j == n - 1:
        return {n - 1: 1.5 / h, n - 2: -2.0 / h, n - 3: 0.5 / h}
    return {j + 1: 0.5 / h, j - 1: -0.5 / h}


def _d2(j, n, h, periodic=False):
    """Second-derivative stencil, one-sided second order at the edges."""
    h2 = h * h
    if periodic:
        p = n - 1
        return {(j + 1) % p: 1.0 / h2, j % p: -2.0 / h2, (j - 1) % p: 1.0 / h2}
    if j == 0:
        return {0: 2.0 / h2, 1: -5.0 / h2, 2: 4.0 / h2, 3: -1.0 / h2}
    if j == n - 1:
        return {n - 1: 2.0 / h2, n - 2: -5.0 / h2, n - 3: 4.0 / h2, n - 4: -1.0 / h2}
    return {j + 1: 1.0 / h2, j: -2.0 / h2, j - 1: 1.0 / h2}


def _merge(*rows):
    out: dict[int, float] = {}
    for row in rows:
        for k, v in row.items():
            out[k] = out.get(k, 0.0) + v
    return out


def _select(points, n):
    return _row([{p: 1.0} for p in points], n)


class ResidualOperator:
    """Base class: subclasses set ``layout`` and implement ``_residual``/``_vjp``.

    Batched inputs have shape ``(B, width)``; single vectors are accepted and
    returned unbatched.
    """

    kind = "abstract"

    def __init__(self, layout: Layout, boundary_weight: float = 1.0):
        if boundary_weight < 0:
            raise ValueError("boundary weight must be non-negative")
        self.layout = layout
        self.grid = layout.grid
        self.boundary_weight = float(boundary_weight)

    @property
    def width(self) -> int:
        return self.layout.width

    def _check(self, X):
        if X.shape[-1] != self.width:
            raise ValueError(
                f"{self.kind} operator expects width {self.width}, got {X.shape[-1]}"
            )

    def __call__(self, x):
        X, single = _as_batch(x)
        self._check(X)
        R = self._residual(X)
        return R[0] if single else R

    residual = __call__

    def vjp(self, x, r_bar):
        """Vector-Jacobian product ``J(x)^T r_bar``."""
        X, single = _as_batch(x)
        self._check(X)
        Rb = np.atleast_2d(np.asarray(r_bar, dtype=float))
        G = self._vjp(X, Rb)
        return G[0] if single else G

    def norm(self, x):
        """Mean of squared residual entries, per sample."""
        R = self(x)
        return np.mean(R * R, axis=-1)

    def value_and_grad(self, x):
        """Per-sample ``norm`` and its gradient with respect to ``x``."""
        X, single = _as_batch(x)
        self._check(X)
        R = self._residual(X)
        m = R.shape[1]
        val = np.mean(R * R, axis=1)
        G = self._vjp(X, 2.0 * R / m)
        if single:
            return val[0], G[0]
        return val, G

    def jacobian(self, x) -> np.ndarray:
        """Dense Jacobian at a single point (built from VJPs)."""
        x = np.asarray(flatten(x) if isinstance(x, JointSample) else x, dtype=float)
        m = self(x).size
        eye = np.eye(m)
        return np.stack([self.vjp(x, eye[i]) for i in range(m)])

    def _residual(self, X):
        raise NotImplementedError

    def _vjp(self, X, Rb):
        raise NotImplementedError


class _TimeDependent1D(ResidualOperator):
    """Shared stencils for ``u_t = ... `` problems on an (n_t, n_x) grid."""

    periodic = False

    def __init__(self, layout, boundary_weight=1.0):
        super().__init__(layout, boundary_weight)
        g = self.grid
        nx, nt = g.n_x, g.n_t
        if nt < 3 or nx < (3 if self.periodic else 4):
            raise ValueError(f"grid {nx}x{nt} too small for {self.kind} stencils")
        N = g.size
        xs = range(0, nx - 1) if self.periodic else range(1, nx)
        pts = [(j, i) for j in range(1, nt) for i in xs]
        self.pde_points = pts

        def lift_t(j, i, row):
            return {jj * nx + i: v for jj, v in row.items()}

        def lift_x(j, i, row):
            return {j * nx + ii: v for ii, v in row.items()}

        self.Dt = _row([lift_t(j, i, _d1(j, nt, g.h_t)) for j, i in pts], N)
        self.Dx = _row([lift_x(j, i, _d1(i, nx, g.h_x, self.periodic)) for j, i in pts], N)
        self.Dxx = _row([lift_x(j, i, _d2(i, nx, g.h_x, self.periodic)) for j, i in pts], N)
        self.n_pde = len(pts)


class HeatOperator(_TimeDependent1D):
    """``u_t = alpha u_xx`` on [0, 2pi] x [0, 1], periodic in x.

    Coefficient: the phase ``phi`` of the initial condition ``sin(x + phi)``.
    """

    kind = "heat"
    periodic = True

    def __init__(self, grid: GridSpec, alpha: float = 3.0, boundary_weight: float = 1.0):
        super().__init__(Layout(grid, "scalar", 1), boundary_weight)
        self.alpha = float(alpha)
        self.params = {"alpha": self.alpha}
        nx, nt = grid.n_x, grid.n_t
        # the last column is tied to the first by periodicity
        self.S0 = _select(range(nx - 1), grid.size)
        self.SL = _select([j * nx for j in range(nt)], grid.size)
        self.SR = _select([j * nx + nx - 1 for j in range(nt)], grid.size)
        self.x0 = grid.x()[:-1]

    def _residual(self, X):
        U, phi = X[:, : self.layout.n_u], X[:, -1:]
        F = _apply(self.Dt, U) - self.alpha * _apply(self.Dxx, U)
        w = self.boundary_weight
        B0 = _apply(self.S0, U) - np.sin(self.x0[None, :] + phi)
        Bp = _apply(self.SL, U) - _apply(self.SR, U)
        return np.concatenate([F, w * B0, w * Bp], axis=1)

    def _vjp(self, X, Rb):
        n = self.n_pde
        nx = self.grid.n_x
        w = self.boundary_weight
        phi = X[:, -1:]
        rF, r0, rp = Rb[:, :n], Rb[:, n : n + nx - 1], Rb[:, n + nx - 1 :]
        gU = _apply(self.Dt.T, rF) - self.alpha * _apply(self.Dxx.T, rF)
        gU += w * _apply(self.S0.T, r0) + w * (_apply(self.SL.T, rp) - _apply(self.SR.T, rp))
        gphi = -w * np.sum(r0 * np.cos(self.x0[None, :] + phi), axis=1, keepdims=True)
        return np.concatenate([gU, gphi], axis=1)


class StokesOperator(_TimeDependent1D):
    """Stokes second problem ``u_t = nu u_xx`` with ``nu = omega / (2 k^2)``.

    Coefficient: the boundary frequency ``omega``. Boundary block: the
    oscillating wall ``u(0, t) = A cos(omega t)`` and the initial profile
    ``u(x, 0) = A exp(-k x) cos(k x)``.
    """

    kind = "stokes"

    def __init__(self, grid: GridSpec, amplitude: float = 2.0, k: float = 5.0,
                 boundary_weight: float = 1.0):
        super().__init__(Layout(grid, "scalar", 1), boundary_weight)
        self.A, self.k = float(amplitude), float(k)
        self.params = {"A": self.A, "k": self.k}
        nx, nt = grid.n_x, grid.n_t
        self.c = 1.0 / (2.0 * self.k ** 2)
        self.SL = _select([j * nx for j in range(nt)], grid.size)
        self.S0 = _select(range(1, nx), grid.size)
        self.tl = grid.t()
        x = grid.x()[1:]
        self.init_profile = self.A * np.exp(-self.k * x) * np.cos(self.k * x)

    def _residual(self, X):
        U, om = X[:, : self.layout.n_u], X[:, -1:]
        F = _apply(self.Dt, U) - self.c * om * _apply(self.Dxx, U)
        w = self.boundary_weight
        BL = _apply(self.SL, U) - self.A * np.cos(om * self.tl[None, :])
        B0 = _apply(self.S0, U) - self.init_profile[None, :]
        return np.concatenate([F, w * BL, w * B0], axis=1)

    def _vjp(self, X, Rb):
        n, nt = self.n_pde, self.grid.n_t
        w = self.boundary_weight
        U, om = X[:, : self.layout.n_u], X[:, -1:]
        rF, rL, r0 = Rb[:, :n], Rb[:, n : n + nt], Rb[:, n + nt :]
        gU = _apply(self.Dt.T, rF) - self.c * om * _apply(self.Dxx.T, rF)
        gU += w * _apply(self.SL.T, rL) + w * _apply(self.S0.T, r0)
        gom = -self.c * np.sum(rF * _apply(self.Dxx, U), axis=1, keepdims=True)
        gom += w * self.A * np.sum(rL * self.tl[None, :] * np.sin(om * self.tl[None, :]),
                                   axis=1, keepdims=True)
        return np.concatenate([gU, gom], axis=1)


class BurgersOperator(_TimeDependent1D):
    """Viscous Burgers ``u_t + (u^2/2)_x = nu u_xx``, periodic in x.

    The coefficient is a field on the same grid whose first time row is the
    initial condition; the remaining rows are not constrained.
    """

    kind = "burgers"
    periodic = True

    def __init__(self, grid: GridSpec, nu: float = 0.01, boundary_weight: float = 1.0):
        super().__init__(Layout(grid, "field"), boundary_weight)
        self.nu = float(nu)
        self.params = {"nu": self.nu}
        nx, nt = grid.n_x, grid.n_t
        self.S0 = _select(range(nx), grid.size)
        self.SL = _select([j * nx for j in range(nt)], grid.size)
        self.SR = _select([j * nx + nx - 1 for j in range(nt)], grid.size)

    def _residual(self, X):
        n_u = self.layout.n_u
        U, A = X[:, :n_u], X[:, n_u:]
        F = _apply(self.Dt, U) + _apply(self.Dx, 0.5 * U * U) - self.nu * _apply(self.Dxx, U)
        w = self.boundary_weight
        B0 = _apply(self.S0, U) - _apply(self.S0, A)
        Bp = _apply(self.SL, U) - _apply(self.SR, U)
        return np.concatenate([F, w * B0, w * Bp], axis=1)

    def _vjp(self, X, Rb):
        n, nx = self.n_pde, self.grid.n_x
        n_u = self.layout.n_u
        w = self.boundary_weight
        U = X[:, :n_u]
        rF, r0, rp = Rb[:, :n], Rb[:, n : n + nx], Rb[:, n + nx :]
        gU = _apply(self.Dt.T, rF) + U * _apply(self.Dx.T, rF) - self.nu * _apply(self.Dxx.T, rF)
        gU += w * _apply(self.S0.T, r0) + w * (_apply(self.SL.T, rp) - _apply(self.SR.T, rp))
        gA = -w * _apply(self.S0.T, r0)
        return np.concatenate([gU, gA], axis=1)


class _Static2D(ResidualOperator):
    """Interior five-point stencils plus homogeneous Dirichlet boundary."""

    def __init__(self, layout, boundary_weight=1.0):
        super().__init__(layout, boundary_weight)
        g = self.grid
        nx, ny = g.n_x, g.n_t
        if nx < 3 or ny < 3:
            raise ValueError(f"grid {nx}x{ny} too small for {self.kind} stencils")
        self.interior = [(j, i) for j in range(1, ny - 1) for i in range(1, nx - 1)]
        self.boundary = [j * nx + i for j in range(ny) for i in range(nx)
                         if j in (0, ny - 1) or i in (0, nx - 1)]
        self.SB = _select(self.boundary, g.size)
        self.n_pde = len(self.interior)


class PoissonOperator(_Static2D):
    """``lap u + k^2 u = a`` in the interior, ``u = 0`` on the boundary."""

    kind = "poisson"

    def __init__(self, grid: GridSpec, wavenumber: float = 0.0, boundary_weight: float = 1.0):
        super().__init__(Layout(grid, "field"), boundary_weight)
        self.k = float(wavenumber)
        self.params = {"k": self.k}
        nx, N = grid.n_x, grid.size
        hx, hy = grid.h_x, grid.h_t
        rows = []
        for j, i in self.interior:
            rows.append({
                j * nx + i + 1: 1 / hx ** 2, j * nx + i - 1: 1 / hx ** 2,
                (j + 1) * nx + i: 1 / hy ** 2, (j - 1) * nx + i: 1 / hy ** 2,
                j * nx + i: -2 / hx ** 2 - 2 / hy ** 2 + self.k ** 2,
            })
        self.L = _row(rows, N)
        self.SI = _select([j * nx + i for j, i in self.interior], N)

    def _residual(self, X):
        n_u = self.layout.n_u
        U, A = X[:, :n_u], X[:, n_u:]
        F = _apply(self.L, U) - _apply(self.SI, A)
        return np.concatenate([F, self.boundary_weight * _apply(self.SB, U)], axis=1)

    def _vjp(self, X, Rb):
        n = self.n_pde
        rF, rB = Rb[:, :n], Rb[:, n:]
        gU = _apply(self.L.T, rF) + self.boundary_weight * _apply(self.SB.T, rB)
        gA = -_apply(self.SI.T, rF)
        return np.concatenate([gU, gA], axis=1)


class DarcyOperator(_Static2D):
    """``-div(a grad u) = q`` in the interior, ``u = 0`` on the boundary.

    Face permeabilities are arithmetic means of the neighbouring nodes. With
    ``threshold=True`` the permeability is binarised at 0.5 before use; that
    path is for evaluating loaded data and has no gradient through ``a``.
    """

    kind = "darcy"

    def __init__(self, grid: GridSpec, forcing: float = 1.0, threshold: bool = False,
                 boundary_weight: float = 1.0):
        super().__init__(Layout(grid, "field"), boundary_weight)
        self.q = float(forcing)
        self.threshold = bool(threshold)
        self.params = {"q": self.q}
        nx, N = grid.n_x, grid.size
        # (difference operator, face-average operator, 1/h^2) for the four faces
        self.faces = []
        for di, dj, h in ((1, 0, grid.h_x), (-1, 0, grid.h_x), (0, 1, grid.h_t), (0, -1, grid.h_t)):
            D, P = [], []
            for j, i in self.interior:
                c, nb = j * nx + i, (j + dj) * nx + i + di
                D.append({nb: 1.0, c: -1.0})
                P.append({nb: 0.5, c: 0.5})
            self.faces.append((_row(D, N), _row(P, N), 1.0 / h ** 2))

    def _perm(self, A):
        return (A >= 0.5).astype(float) if self.threshold else A

    def _residual(self, X):
        n_u = self.layout.n_u
        U, A = X[:, :n_u], self._perm(X[:, n_u:])
        F = -self.q * np.ones((X.shape[0], self.n_pde))
        for D, P, s in self.faces:
            F -= s * _apply(P, A) * _apply(D, U)
        return np.concatenate([F, self.boundary_weight * _apply(self.SB, U)], axis=1)

    def _vjp(self, X, Rb):
        n, n_u = self.n_pde, self.layout.n_u
        U, A = X[:, :n_u], self._perm(X[:, n_u:])
        rF, rB = Rb[:, :n], Rb[:, n:]
        gU = self.boundary_weight * _apply(self.SB.T, rB)
        gA = np.zeros_like(A)
        for D, P, s in self.faces:
            gU -= s * _apply(D.T, _apply(P, A) * rF)
            gA -= s * _apply(P.T, _apply(D, U) * rF)
        if self.threshold:
            gA[:] = 0.0
        return np.concatenate([gU, gA], axis=1)


class CoordinateDifferenceOperator(ResidualOperator):
    """Residual ``x[i] - x[j]`` on plain vectors (the correlated-MoG constraint)."""

    kind = "difference"

    def __init__(self, width: int = 2, i: int = 0, j: int = 1):
        self._width = int(width)
        self.i, self.j = i, j
        self.layout = None
        self.grid = None
        self.boundary_weight = 0.0
        self.params = {}

    @property
    def width(self) -> int:
        return self._width

    def _residual(self, X):
        return X[:, [self.i]] - X[:, [self.j]]

    def _vjp(self, X, Rb):
        G = np.zeros_like(X)
        G[:, self.i] += Rb[:, 0]
        G[:, self.j] -= Rb[:, 0]
        return G


_OPERATORS = {
    "heat": HeatOperator,
    "stokes": StokesOperator,
    "burgers": BurgersOperator,
    "darcy": DarcyOperator,
    "poisson": PoissonOperator,
}


def make_operator(kind: str, grid: GridSpec, **params) -> ResidualOperator:
    if kind == "stefan":
        raise ValueError("the Stefan problem has no residual operator (shock nondifferentiability)")
    try:
        cls = _OPERATORS[kind]
    except KeyError:
        raise ValueError(f"unsupported residual kind {kind!r}") from None
    return cls(grid, **params)


def residual(op: ResidualOperator, x) -> np.ndarray:
    if isinstance(x, JointSample) and op.layout is not None and x.layout != op.layout:
        raise ValueError("sample layout does not match the operator grid")
    return op(x)


def residual_norm(op: ResidualOperator, x):
    if isinstance(x, JointSample) and op.layout is not None and x.layout != op.layout:
        raise ValueError("sample layout does not match the operator grid")
    return op.norm(x)


# ---------------------------------------------------------------- datasets

COEFFICIENT_RANGES = {
    "stokes": (2.0, 8.0),
    "heat": (0.0, math.pi),
    "pme": (1.0, 5.0),
    "stefan": (0.55, 0.7),
}

DEFAULT_GRIDS = {
    "stokes": GridSpec(32, 32, 1.0, 1.0),
    "heat": GridSpec(32, 32, 2 * math.pi, 1.0),
    "pme": GridSpec(32, 32, 1.0, 1.0),
    "stefan": GridSpec(32, 32, 1.0, 1.0),
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n_samples: int
    grid: GridSpec | None = None
    seed: int = 0
    coef_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in COEFFICIENT_RANGES and self.kind != "correlated_mog":
            raise ValueError(f"unsupported dataset kind {self.kind!r}")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.coef_range is None and self.kind in COEFFICIENT_RANGES:
            object.__setattr__(self, "coef_range", COEFFICIENT_RANGES[self.kind])
        if self.grid is None and self.kind in DEFAULT_GRIDS:
            object.__setattr__(self, "grid", DEFAULT_GRIDS[self.kind])


def stokes_solution(grid, omega, amplitude=2.0, k=5.0):
    X, T = grid.mesh()
    return amplitude * np.exp(-k * X) * np.cos(k * X - omega * T)


def heat_solution(grid, phi, alpha=3.0):
    X, T = grid.mesh()
    return np.exp(-alpha * T) * np.sin(X + phi)


def pme_solution(grid, m):
    X, T = grid.mesh()
    return (m * np.maximum(T - X, 0.0)) ** (1.0 / m)


def stefan_alpha(u_star: float) -> float:
    """Root of ``(1 - u*)/sqrt(pi) = u* erf(a) a exp(a^2)``."""
    f = lambda a: u_star * erf(a) * a * np.exp(a * a) - (1 - u_star) / math.sqrt(math.pi)
    return brentq(f, 1e-12, 10.0)


def stefan_solution(grid, u_star):
    X, T = grid.mesh()
    alpha = stefan_alpha(u_star)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = np.where(T > 0, X / (2 * np.sqrt(np.where(T > 0, T, 1.0))), np.inf)
    arg = np.where((T == 0) & (X == 0), 0.0, arg)
    val = 1.0 - (1.0 - u_star) * erf(arg) / erf(alpha)
    return np.where(val >= u_star, val, 0.0)


_SOLUTIONS = {
    "stokes": stokes_solution,
    "heat": heat_solution,
    "pme": pme_solution,
    "stefan": stefan_solution,
}


def generate_dataset(spec: DatasetSpec) -> list:
    """Closed-form samples for the analytical datasets.

    Grid kinds return :class:`JointSample` objects with a scalar coefficient.
    ``correlated_mog`` has no grid and returns plain length-2 vectors.
    """
    rng = RngSource(spec.seed)
    if spec.kind == "correlated_mog":
        from .jensen import correlated_mog_spec, sample_mog

        return list(sample_mog(correlated_mog_spec(), spec.n_samples, rng))
    lo, hi = spec.coef_range
    coefs = rng.uniform(spec.n_samples, lo, hi)
    solve = _SOLUTIONS[spec.kind]
    out = []
    for c in coefs:
        U = solve(spec.grid, c)
        if spec.kind == "heat":
            U[:, -1] = U[:, 0]  # exact periodicity instead of sin(2pi + phi) round-off
        out.append(JointSample(Field(spec.grid, U.ravel()), np.array([c])))
    return out


def operator_for_dataset(kind: str, grid: GridSpec, **params) -> ResidualOperator:
    if kind in ("pme", "stefan", "correlated_mog"):
        raise ValueError(f"no residual operator is provided for dataset kind {kind!r}")
    return make_operator(kind, grid, **params)
