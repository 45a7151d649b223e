import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piddm.fields import Field, GridSpec, JointSample, Layout, RngSource, flatten, stack
from piddm.pde import (CoordinateDifferenceOperator, DatasetSpec, HeatOperator, ResidualOperator,
                       StokesOperator, generate_dataset, heat_solution, make_operator,
                       operator_for_dataset, pme_solution, residual, residual_norm, stefan_alpha,
                       stokes_solution)

from conftest import rel_err


def heat_grid(n):
    return GridSpec(n, n, 2 * math.pi, 1.0)


def heat_vec(grid, phi):
    U = heat_solution(grid, phi)
    U[:, -1] = U[:, 0]
    return np.concatenate([U.ravel(), [phi]])


def stokes_vec(grid, omega):
    return np.concatenate([stokes_solution(grid, omega).ravel(), [omega]])


def rms(op, x):
    return math.sqrt(float(op.norm(x)))


@pytest.mark.parametrize("kind,make", [("heat", lambda g: heat_vec(g, 0.7)),
                                       ("stokes", lambda g: stokes_vec(g, 5.0))])
def test_second_order_convergence(kind, make):
    g = heat_grid(32) if kind == "heat" else GridSpec(32, 32)
    ratios = []
    prev = None
    for _ in range(3):
        cur = rms(make_operator(kind, g), make(g))
        if prev is not None:
            ratios.append(prev / cur)
        prev = cur
        g = g.refined()
    for r in ratios:
        assert 3.5 <= r <= 4.5, ratios


def test_heat_max_residual_order():
    errs, hs = [], []
    g = heat_grid(32)
    for _ in range(3):
        op = HeatOperator(g)
        errs.append(np.abs(op(heat_vec(g, 1.1))[: op.n_pde]).max())
        hs.append(g.h_x)
        g = g.refined()
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 1.9


def test_heat_constant_and_linear_probes():
    g = heat_grid(9)
    op = HeatOperator(g)
    X, T = g.mesh()
    const = np.concatenate([np.full(g.size, 3.3), [0.2]])
    np.testing.assert_allclose(op(const)[: op.n_pde], 0.0, atol=1e-12)
    lin = np.concatenate([T.ravel(), [0.2]])
    np.testing.assert_allclose(op(lin)[: op.n_pde], 1.0, atol=1e-12)


def test_stokes_polynomial_probe():
    # one-sided stencils are exact on cubics: u = t + x^3 gives 1 - c*omega*6x
    g = GridSpec(7, 6)
    op = StokesOperator(g)
    X, T = g.mesh()
    om = 4.0
    x = np.concatenate([(T + X ** 3).ravel(), [om]])
    pts = np.array([X[j, i] for j, i in op.pde_points])
    np.testing.assert_allclose(op(x)[: op.n_pde], 1 - op.c * om * 6 * pts, atol=1e-10)


def test_residual_norm_mean_of_squares():
    class Identity(ResidualOperator):
        kind = "identity"

        def _residual(self, X):
            return X[:, :2]

    op = Identity(Layout(GridSpec(3), "scalar", 1))
    assert op.norm(np.array([1.0, -1.0, 5.0, 0.0])) == 1.0
    assert op.norm(np.zeros(4)) == 0.0


def _stokes_dense_oracle(grid, x, A=2.0, k=5.0):
    """Independent stencil evaluation by explicit loops."""
    nx, nt = grid.n_x, grid.n_t
    ht, hx = grid.h_t, grid.h_x
    U = x[:-1].reshape(nt, nx)
    om = x[-1]
    c = om / (2 * k * k)
    F = []
    for j in range(1, nt):
        for i in range(1, nx):
            if j < nt - 1:
                ut = (U[j + 1, i] - U[j - 1, i]) / (2 * ht)
            else:
                ut = (1.5 * U[j, i] - 2 * U[j - 1, i] + 0.5 * U[j - 2, i]) / ht
            if i < nx - 1:
                uxx = (U[j, i + 1] - 2 * U[j, i] + U[j, i - 1]) / hx ** 2
            else:
                uxx = (2 * U[j, i] - 5 * U[j, i - 1] + 4 * U[j, i - 2] - U[j, i - 3]) / hx ** 2
            F.append(ut - c * uxx)
    t = grid.t()
    xs = grid.x()
    BL = U[:, 0] - A * np.cos(om * t)
    B0 = U[0, 1:] - A * np.exp(-k * xs[1:]) * np.cos(k * xs[1:])
    R = np.concatenate([F, BL, B0])
    return R, float(np.mean(R ** 2))


def test_stokes_norm_matches_dense_oracle():
    g = GridSpec(64, 64)
    x = stokes_vec(g, 6.3)
    x[:-1] += 1e-3 * RngSource(0).normal(g.size)  # make the boundary block nonzero too
    op = StokesOperator(g)
    R, n = _stokes_dense_oracle(g, x)
    assert rel_err(op(x), R) < 1e-12
    assert abs(op.norm(x) - n) / n < 1e-12


def _ops8():
    g = GridSpec(8, 8)
    return [HeatOperator(heat_grid(8)), StokesOperator(g), make_operator("burgers", g),
            make_operator("poisson", g, wavenumber=2.0), make_operator("darcy", g),
            CoordinateDifferenceOperator(3, 0, 2)]


@pytest.mark.parametrize("op", _ops8(), ids=lambda o: o.kind)
def test_jacobian_matches_finite_differences(op):
    x = RngSource(2).normal(op.width)
    if op.kind == "darcy":
        x[op.layout.n_u:] = 1.0 + 0.3 * np.abs(x[op.layout.n_u:])
    J = op.jacobian(x)
    d = 1e-6
    Jn = np.stack([(op(x + d * e) - op(x - d * e)) / (2 * d) for e in np.eye(op.width)], axis=1)
    assert rel_err(J, Jn) < 1e-6


@pytest.mark.parametrize("op", _ops8(), ids=lambda o: o.kind)
def test_value_and_grad_consistent(op):
    X = RngSource(3).normal((3, op.width))
    v, G = op.value_and_grad(X)
    np.testing.assert_allclose(v, op.norm(X))
    for b in range(3):
        np.testing.assert_allclose(G[b], op.vjp(X[b], 2 * op(X[b]) / op(X[b]).size), atol=1e-12)


@pytest.mark.parametrize("kind", ["heat", "poisson"])
def test_linearity_of_pde_block(kind):
    g = heat_grid(8) if kind == "heat" else GridSpec(8, 8)
    op = make_operator(kind, g)
    r = RngSource(4)
    x, y = r.normal(op.width), r.normal(op.width)
    zero = np.zeros(op.width)
    n = op.n_pde
    lhs = op(x + y)[:n]
    rhs = op(x)[:n] + op(y)[:n] - op(zero)[:n]
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_darcy_linear_in_u_for_fixed_a():
    g = GridSpec(7, 7)
    op = make_operator("darcy", g, forcing=2.0)
    r = RngSource(5)
    a = 1 + r.uniform(g.size)
    u1, u2 = r.normal(g.size), r.normal(g.size)
    F = lambda u: op(np.concatenate([u, a]))[: op.n_pde]
    np.testing.assert_allclose(F(u1 + u2), F(u1) + F(u2) - F(np.zeros(g.size)), atol=1e-9)


def test_unsupported_kinds_rejected():
    with pytest.raises(ValueError):
        make_operator("stefan", GridSpec(8, 8))
    with pytest.raises(ValueError):
        make_operator("navier_stokes", GridSpec(8, 8))
    with pytest.raises(ValueError):
        operator_for_dataset("pme", GridSpec(8, 8))


def test_grid_mismatch_rejected():
    op = StokesOperator(GridSpec(8, 8))
    bad = JointSample(Field(GridSpec(9, 8), np.zeros(72)), np.array([3.0]))
    with pytest.raises(ValueError):
        residual(op, bad)
    with pytest.raises(ValueError):
        residual_norm(op, np.zeros(10))


def test_stencil_too_small():
    with pytest.raises(ValueError):
        StokesOperator(GridSpec(3, 3))


def test_stokes_dataset_left_boundary_exact():
    g = GridSpec(16, 16)
    for s in generate_dataset(DatasetSpec("stokes", 5, g, 1)):
        om = s.a[0]
        assert 2.0 <= om <= 8.0
        np.testing.assert_array_equal(s.u.as_grid()[:, 0], 2.0 * np.cos(om * g.t()))


def test_heat_dataset_initial_row():
    g = heat_grid(16)
    for s in generate_dataset(DatasetSpec("heat", 5, g, 2)):
        phi = s.a[0]
        assert 0.0 <= phi <= math.pi
        np.testing.assert_array_equal(s.u.as_grid()[0, :-1], np.sin(g.x()[:-1] + phi))
        np.testing.assert_allclose(s.u.as_grid()[0], np.sin(g.x() + phi), atol=1e-15)


def test_pme_zero_where_t_below_x():
    g = GridSpec(12, 12)
    X, T = g.mesh()
    for m in (1.0, 2.5, 5.0):
        U = pme_solution(g, m)
        assert np.all(U[T < X] == 0.0)
        assert np.all(U[T > X] > 0.0)


def test_stefan_generator_in_range():
    g = GridSpec(10, 10)
    data = generate_dataset(DatasetSpec("stefan", 3, g, 0))
    for s in data:
        assert 0.55 <= s.a[0] <= 0.7
        assert np.all(np.isfinite(s.u.values))
    a = stefan_alpha(0.6)
    lhs = 0.6 * math.erf(a) * a * math.exp(a * a)
    assert abs(lhs - 0.4 / math.sqrt(math.pi)) < 1e-12


@pytest.mark.parametrize("kind", ["stokes", "heat"])
def test_boundary_block_exactly_zero(kind):
    g = heat_grid(16) if kind == "heat" else GridSpec(16, 16)
    op = operator_for_dataset(kind, g)
    X = stack(generate_dataset(DatasetSpec(kind, 20, g, 3)))
    assert np.all(op(X)[:, op.n_pde:] == 0.0)


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec("stokes", 0)
    with pytest.raises(ValueError):
        DatasetSpec("navier", 3)
    assert DatasetSpec("stokes", 3).coef_range == (2.0, 8.0)


def test_correlated_mog_dataset_vectors():
    data = generate_dataset(DatasetSpec("correlated_mog", 100, seed=1))
    X = np.stack(data)
    assert X.shape == (100, 2)
    assert np.max(np.abs(X[:, 0] - X[:, 1])) < 0.05


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), w=st.floats(0.0, 5.0))
def test_boundary_weight_scales_boundary_block(seed, w):
    g = GridSpec(6, 5)
    x = RngSource(seed).normal(g.size + 1)
    base = StokesOperator(g)(x)
    weighted = StokesOperator(g, boundary_weight=w)(x)
    n = StokesOperator(g).n_pde
    np.testing.assert_array_equal(weighted[:n], base[:n])
    np.testing.assert_allclose(weighted[n:], w * base[n:], rtol=1e-14, atol=0)
