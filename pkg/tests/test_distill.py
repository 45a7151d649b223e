import numpy as np
import pytest
from scipy import stats

from piddm.autodiff import ParamNet
from piddm.diffusion import (DiffusionSchedule, NfeCounter, TeacherModel, VelocityField, euler_sample,
                             train_teacher)
from piddm.distill import (DistillConfig, DistillDiverged, PairDataset, ReflowConfig, StudentModel,
                           distill_loss, fingerprint, generate_pairs, reflow, train_student)
from piddm.fields import GridSpec, RngSource, stack
from piddm.jensen import AnalyticMoGVelocity, MoGSpec, mixture_marginal_cdf
from piddm.pde import DatasetSpec, generate_dataset, operator_for_dataset

from conftest import fd_check


class ZeroField(VelocityField):
    def __init__(self, width=4):
        self.schedule = DiffusionSchedule("linear")
        self.w = width

    @property
    def width(self):
        return self.w

    def forward(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=float)), lambda u: np.zeros_like(u)


@pytest.fixture(scope="module")
def heat8():
    g = GridSpec(8, 8)
    X = stack(generate_dataset(DatasetSpec("heat", 16, g, 0)))
    return X, operator_for_dataset("heat", g)


def test_pairs_deterministic_and_fingerprinted():
    t = TeacherModel.create(5, RngSource(0), hidden=(16,))
    a = generate_pairs(t, 32, 10, RngSource(3))
    b = generate_pairs(t, 32, 10, RngSource(3))
    np.testing.assert_array_equal(a.eps, b.eps)
    np.testing.assert_array_equal(a.x0, b.x0)
    assert a.teacher == fingerprint(t) and a.n_steps == 10 and a.nfe == 320
    np.testing.assert_array_equal(a.x0, euler_sample(t, a.eps, 10))


def test_zero_teacher_pairs_are_identity():
    p = generate_pairs(ZeroField(), 20, 7, RngSource(1))
    np.testing.assert_array_equal(p.x0, p.eps)


def test_pair_dataset_validation():
    with pytest.raises(ValueError):
        PairDataset(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        PairDataset(np.zeros((1, 2)), np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        generate_pairs(ZeroField(), 0)


def test_mog_pairs_match_marginals():
    spec = MoGSpec(means=np.array([[-1.0, 0.0], [1.0, 0.5]]), covs=np.array([0.04, 0.04]), weights=np.array([0.3, 0.7]))
    p = generate_pairs(AnalyticMoGVelocity(spec), 10000, 100, RngSource(5))
    for c in range(2):
        assert stats.kstest(p.x0[:, c], mixture_marginal_cdf(spec, c)).statistic < 0.02


def test_distill_loss_zero_at_exact_fit():
    # identity student on pairs with x0 = eps and a residual that vanishes on them
    net = ParamNet([3, 3])
    net.params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    s = StudentModel(net)
    eps = RngSource(2).normal((5, 3))

    class Null:
        def value_and_grad(self, X):
            return np.zeros(len(X)), np.zeros_like(X)

        def norm(self, X):
            return np.zeros(len(X))

    loss, g = distill_loss(s, eps, eps, Null(), 10.0)
    assert loss == 0.0
    assert np.all(g == 0)


def test_distill_loss_lambda_zero_is_regression(heat8):
    X, op = heat8
    s = StudentModel.create(X.shape[1], RngSource(0), hidden=(8,))
    eps = RngSource(1).normal(X.shape)
    loss, _, parts = distill_loss(s, eps, X, op, 0.0, return_parts=True)
    out = s(eps)
    assert loss == pytest.approx(np.mean(np.sum((out - X) ** 2, axis=1)), rel=1e-13)
    assert parts["physics"] > 0
    with pytest.raises(ValueError):
        distill_loss(s, eps, X, op, -1.0)


def test_distill_loss_gradient_fd(heat8):
    X, op = heat8
    s = StudentModel.create(X.shape[1], RngSource(4), hidden=(10,), activation="gelu")
    eps = RngSource(5).normal((6, X.shape[1]))
    _, g = distill_loss(s, eps, X[:6], op, 3.0)

    def f(p):
        c = s.copy()
        c.net.params = p
        return distill_loss(c, eps, X[:6], op, 3.0)[0]

    idx = RngSource(6).permutation(s.net.n_params)[:60]
    assert fd_check(f, g, s.net.params.copy(), idx=idx, delta=1e-5) < 1e-4


def test_student_requires_timeless_square_net():
    with pytest.raises(ValueError):
        StudentModel(ParamNet([3 + 2, 3], time_pairs=1))
    with pytest.raises(ValueError):
        StudentModel(ParamNet([3, 4]))


def test_student_nfe_one_per_batch():
    s = StudentModel.create(4, RngSource(0), hidden=(8,))
    c = NfeCounter()
    s(RngSource(1).normal((50, 4)), c)
    assert c.count == 1


def test_distill_config_validation():
    for kw in ({"lam": -1}, {"batch_size": 0}, {"epochs": -1}, {"refresh_interval": 0},
               {"pairs_per_refresh": 0}):
        with pytest.raises(ValueError):
            DistillConfig(**kw)


def test_zero_epochs_returns_init():
    t = TeacherModel.create(4, RngSource(0), hidden=(8,))
    s0 = StudentModel.create(4, RngSource(1), hidden=(8,))
    s = train_student(t, None, DistillConfig(epochs=0, hidden=(8,)), RngSource(2), student=s0.copy())
    np.testing.assert_array_equal(s.net.params, s0.net.params)


def test_refresh_replaces_pool_and_is_reproducible():
    t = TeacherModel.create(4, RngSource(0), hidden=(8,))
    cfg = DistillConfig(lam=0.0, epochs=6, refresh_interval=2, pairs_per_refresh=64, batch_size=32,
                        n_steps=5, hidden=(8,), early_stop=False)
    a = train_student(t, None, cfg, RngSource(7))
    b = train_student(t, None, cfg, RngSource(7))
    np.testing.assert_array_equal(a.net.params, b.net.params)
    assert a.history["refreshes"] == 2
    assert a.history["pair_nfe"] == 3 * 64 * 5
    assert len(a.history["regression"]) == 6 * 2


def test_early_stop_on_plateau():
    # x0 == eps is fit exactly by the initial identity map, so the window never improves
    net = ParamNet([3, 3])
    net.params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    cfg = DistillConfig(lam=0.0, epochs=50, refresh_interval=2, pairs_per_refresh=32, batch_size=32,
                        n_steps=3, hidden=(), lr=0.0)
    s = train_student(ZeroField(3), None, cfg, RngSource(0), student=StudentModel(net))
    assert s.history["stopped_early"]
    assert s.history["epochs"] == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    pairs = PairDataset(np.ones((8, 2)), np.full((8, 2), 1e200))
    cfg = DistillConfig(lam=0.0, epochs=3, batch_size=8, hidden=(4,))
    with pytest.raises(DistillDiverged):
        train_student(None, None, cfg, RngSource(0), pairs=pairs)


def test_lambda_zero_generalises():
    spec = MoGSpec(means=np.array([[-1.0, 0.0], [1.0, 0.0]]), covs=np.array([0.04, 0.04]), weights=np.array([0.5, 0.5]))
    teacher = AnalyticMoGVelocity(spec)
    cfg = DistillConfig(lam=0.0, epochs=60, refresh_interval=1000, pairs_per_refresh=2048,
                        batch_size=256, hidden=(64, 64), n_steps=50)
    s = train_student(teacher, None, cfg, RngSource(0))
    train_mse = np.mean(s.history["regression"][-8:])
    held = generate_pairs(teacher, 2048, 50, RngSource(99))
    test_mse = float(np.mean(np.sum((s(held.eps) - held.x0) ** 2, axis=1)))
    assert test_mse < 2 * train_mse


def test_reflow_linear_couplings_give_straight_paths():
    r = RngSource(0)
    A = np.array([[1.5, 0.3], [0.0, 0.7]])
    eps = r.normal((4096, 2))
    pairs = PairDataset(eps, eps @ A.T)
    m = reflow(pairs, ReflowConfig(iters=1000, batch_size=256, lr=2e-3, hidden=(32, 32),
                                   activation="gelu", time_pairs=2), RngSource(1))
    # along each trajectory x_t = (1-t) A e + t e the learned velocity should be constant
    ts = np.linspace(0.1, 0.9, 9)
    e = RngSource(2).normal((64, 2))
    vs = np.stack([m.velocity((1 - t) * e @ A.T + t * e, t) for t in ts])
    assert float(np.mean(np.var(vs, axis=0))) < 1e-3


def test_reflow_zero_iters_and_copy():
    base = TeacherModel.create(2, RngSource(0), hidden=(8,))
    pairs = PairDataset(np.ones((4, 2)), np.zeros((4, 2)))
    m = reflow(pairs, ReflowConfig(iters=0), RngSource(0), model=base)
    np.testing.assert_array_equal(m.net.params, base.net.params)
    assert m is not base
    with pytest.raises(ValueError):
        reflow(PairDataset(np.zeros((0, 2)), np.zeros((0, 2))))


def test_reflow_eases_distillation():
    # small Stokes problem; student fit against its own teacher's couplings, 3-seed median
    g = GridSpec(8, 8)
    X = stack(generate_dataset(DatasetSpec("stokes", 512, g, 0)))
    base, flowed = [], []
    for seed in range(3):
        r = RngSource(seed)
        T = TeacherModel.create(X.shape[1], r, hidden=(64, 64))
        T, _ = train_teacher(T, X, 1500, 128, 1e-3, r.child("t"))
        P = generate_pairs(T, 8192, 50, r.child("p"))
        R = reflow(P, ReflowConfig(iters=5000, hidden=(64, 64)), r.child("r"))
        for tea, out in ((T, base), (R, flowed)):
            cfg = DistillConfig(lam=0.0, epochs=300, refresh_interval=50, pairs_per_refresh=1024,
                                hidden=(128, 128), n_steps=50, early_stop=False)
            s = train_student(tea, None, cfg, r.child("s"))
            H = generate_pairs(tea, 1024, 50, RngSource(99))
            out.append(float(np.mean(np.sum((s(H.eps) - H.x0) ** 2, axis=1))))
    assert np.median(flowed) <= np.median(base)
