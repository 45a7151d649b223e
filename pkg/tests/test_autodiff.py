import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piddm.autodiff import (ParamNet, TapeConsumedError, backward, forward, grad_input, grad_params,
                            load_checkpoint, save_checkpoint, time_embedding)
from piddm.fields import GridSpec, RngSource
from piddm.optim import AdamState, LbfgsState, adam_step, lbfgs_minimize, lbfgs_minimize_batched
from piddm.pde import HeatOperator

from conftest import fd_check, rel_err


def naive_forward(net, x, t=None):
    h = np.asarray(x, dtype=float)
    if net.time_pairs:
        freqs = np.geomspace(1.0, 100.0, net.time_pairs)
        h = np.concatenate([h, np.sin(t * freqs), np.cos(t * freqs)])
    layers = net.layers()
    for k, (W, b) in enumerate(layers):
        z = np.array([sum(h[i] * W[i, j] for i in range(W.shape[0])) + b[j] for j in range(W.shape[1])])
        h = z if k == len(layers) - 1 else (np.maximum(z, 0) if net.activation == "relu"
                                             else 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z ** 3))))
    return h


def test_param_count():
    net = ParamNet([5, 7, 3])
    assert net.n_params == 6 * 7 + 8 * 3


def test_zero_params_zero_output():
    net = ParamNet([4, 6, 6, 4])
    np.testing.assert_array_equal(forward(net, np.ones(4))[0], 0.0)


def test_identity_linear_layer():
    net = ParamNet([3, 3])
    net.params[:9] = np.eye(3).ravel()
    x = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(forward(net, x)[0], x)


@pytest.mark.parametrize("activation,time_pairs", [("relu", 0), ("gelu", 0), ("relu", 3)])
def test_forward_matches_naive_oracle(activation, time_pairs):
    r = RngSource(0)
    net = ParamNet.init([4 + 2 * time_pairs, 6, 5, 4], r, activation, time_pairs)
    net.params += 0.1 * r.normal(net.n_params)
    x = r.normal(4)
    t = 0.37 if time_pairs else None
    np.testing.assert_allclose(forward(net, x, t)[0], naive_forward(net, x, t), rtol=0, atol=1e-12)


def test_batch_matches_single():
    r = RngSource(1)
    net = ParamNet.init([3, 8, 3], r)
    X = r.normal((5, 3))
    Y = forward(net, X)[0]
    for b in range(5):
        np.testing.assert_allclose(Y[b], forward(net, X[b])[0], atol=1e-14)


def test_linear_layer_gradients_analytic():
    r = RngSource(2)
    net = ParamNet([3, 2])
    net.params = r.normal(net.n_params)
    W, _ = net.layers()[0]
    x = r.normal(3)
    _, tape = forward(net, x)
    gp = grad_params(tape, np.ones(2))
    np.testing.assert_allclose(gp[:6].reshape(3, 2), np.outer(x, np.ones(2)))
    u = r.normal(2)
    _, tape = forward(net, x)
    np.testing.assert_allclose(grad_input(tape, u), W @ u)


def test_zero_upstream_zero_gradient():
    r = RngSource(3)
    net = ParamNet.init([4, 5, 4], r)
    _, tape = forward(net, r.normal(4))
    assert not np.any(grad_params(tape, np.zeros(4)))


def test_tape_consumed_once():
    net = ParamNet.init([2, 3, 2], RngSource(0))
    _, tape = forward(net, np.ones(2))
    backward(tape, np.ones(2))
    with pytest.raises(TapeConsumedError):
        backward(tape, np.ones(2))


def test_dimension_mismatch():
    net = ParamNet.init([3, 4, 3], RngSource(0))
    with pytest.raises(ValueError):
        forward(net, np.ones(4))
    _, tape = forward(net, np.ones(3))
    with pytest.raises(ValueError):
        backward(tape, np.ones(5))
    tnet = ParamNet.init([3 + 4, 5, 3], RngSource(0), time_pairs=2)
    with pytest.raises(ValueError):
        forward(tnet, np.ones(3))


@pytest.mark.parametrize("activation", ["gelu", "relu"])
def test_param_and_input_gradients_fd(activation):
    r = RngSource(4)
    net = ParamNet.init([5 + 4, 7, 6, 5], r, activation, time_pairs=2)
    x = r.normal(5)
    u = r.normal(5)
    t = 0.3
    _, tape = forward(net, x, t)
    gp, gx = backward(tape, u)

    def fp(p):
        n = net.copy()
        n.params = p
        return float(u @ forward(n, x, t)[0])

    assert fd_check(fp, gp, net.params.copy(), delta=1e-5) < 1e-4
    assert fd_check(lambda z: float(u @ forward(net, z, t)[0]), gx, x.copy(), delta=1e-5) < 1e-4


def test_residual_composition_gradient():
    # d/d eps ||R(d(eps))||^2 on an 8x8 heat problem
    g = GridSpec(8, 8, 2 * np.pi, 1.0)
    op = HeatOperator(g)
    r = RngSource(5)
    net = ParamNet.init([op.width, 32, op.width], r, "gelu")
    eps = r.normal(op.width)
    out, tape = forward(net, eps)
    _, G = op.value_and_grad(out)
    ge = grad_input(tape, G)
    f = lambda e: float(op.norm(forward(net, e)[0]))
    idx = RngSource(6).permutation(op.width)[:20]
    assert fd_check(f, ge, eps.copy(), idx=idx) < 1e-4


def test_time_embedding_shape():
    E = time_embedding(np.array([0.1, 0.2]), 3, 2)
    assert E.shape == (2, 6)
    np.testing.assert_allclose(E[:, 3], np.cos(np.array([0.1, 0.2])))


def test_checkpoint_roundtrip(tmp_path):
    net = ParamNet.init([6, 5, 4], RngSource(0), "gelu", time_pairs=1)
    save_checkpoint(tmp_path / "n.pck", net, kind="stokes")
    net2, meta = load_checkpoint(tmp_path / "n.pck")
    np.testing.assert_array_equal(net2.params, net.params)
    assert net2.layer_sizes == net.layer_sizes and net2.activation == "gelu"
    assert meta == {"kind": "stokes"}


# ------------------------------------------------------------ optimizers


def test_adam_scalar_first_step():
    st_ = AdamState(lr=0.1)
    p = adam_step(st_, np.array([1.0]), np.array([1.0]))
    assert abs((1.0 - p[0]) - 0.1) < 1e-6


def test_adam_zero_grad_unchanged():
    p0 = np.array([0.3, -2.0])
    np.testing.assert_array_equal(adam_step(AdamState(), p0, np.zeros(2)), p0)


def test_adam_nan_rejected():
    with pytest.raises(FloatingPointError):
        adam_step(AdamState(), np.zeros(2), np.array([np.nan, 0.0]))


def test_adam_quadratic_convergence():
    target = RngSource(0).normal(6)
    p = np.zeros(6)
    s = AdamState(lr=1e-2)
    for _ in range(500):
        p = adam_step(s, p, 2 * (p - target))
    assert np.linalg.norm(p - target) < 1e-3


def _rosen(x):
    f = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
    g = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
    return f, g


def test_lbfgs_quadratic_10d():
    r = RngSource(1)
    M = r.normal((10, 10))
    A = M @ M.T + 10 * np.eye(10)
    b = r.normal(10)
    res = lbfgs_minimize(LbfgsState(tolerance_grad=1e-12), lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b),
                         np.zeros(10), 15)
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-8)
    assert res.n_iters <= 15


def test_lbfgs_rosenbrock():
    res = lbfgs_minimize(LbfgsState(tolerance_grad=1e-10), _rosen, np.array([-1.2, 1.0]), 80)
    assert np.linalg.norm(res.x - 1.0) < 1e-5


def test_lbfgs_optimal_init():
    res = lbfgs_minimize(LbfgsState(), lambda x: (float(x @ x), 2 * x), np.zeros(3), 10)
    assert res.n_iters == 0 and res.converged
    np.testing.assert_array_equal(res.x, 0.0)


def test_lbfgs_strong_wolfe_and_curvature_pairs():
    st_ = LbfgsState(tolerance_grad=1e-10)
    res = lbfgs_minimize(st_, _rosen, np.array([-1.2, 1.0]), 80)
    tr = np.array(res.trace)
    assert np.all(np.diff(tr) < 0)
    assert all(float(s @ y) > 0 for s, y, _ in st_.pairs)


def test_lbfgs_nonfinite_start():
    with pytest.raises(FloatingPointError):
        lbfgs_minimize(LbfgsState(), lambda x: (np.nan, x), np.ones(2), 5)


def test_batched_lbfgs_matches_scalar():
    inits = np.array([[-1.2, 1.0], [0.5, -0.3], [2.0, 2.0]])

    def rows(X):
        out = [_rosen(x) for x in X]
        return np.array([f for f, _ in out]), np.stack([g for _, g in out])

    res = lbfgs_minimize_batched(rows, inits, max_iters=100, tolerance_grad=1e-10)
    for b, x0 in enumerate(inits):
        single = lbfgs_minimize(LbfgsState(tolerance_grad=1e-10), _rosen, x0, 100)
        np.testing.assert_allclose(res.x[b], single.x, atol=1e-10)
        assert res.n_iters[b] == single.n_iters


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_optimizers_stay_finite(seed):
    r = RngSource(seed)
    x0 = r.normal(4) * 3
    f = lambda x: (float(np.sum(np.log1p(x ** 2))), 2 * x / (1 + x ** 2))
    res = lbfgs_minimize(LbfgsState(), f, x0, 30)
    assert np.all(np.isfinite(res.x))
    p = x0.copy()
    s = AdamState(lr=0.1)
    for _ in range(50):
        p = adam_step(s, p, f(p)[1])
    assert np.all(np.isfinite(p))
