import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piddm.diffusion import DiffusionSchedule, euler_sample
from piddm.fields import RngSource
from piddm.jensen import (AnalyticMoGVelocity, CorrelatedMoGConfig, LatentCodeObjective, MoGSpec,
                          angular_error, correlated_mog_pipeline, correlated_mog_spec, gap_metrics,
                          gt_conditional_velocity, histogram_rows, latent_line_spec, marginal_ks,
                          mog_log_density, mog_posterior_mean, mog_score, off_support_fraction,
                          sample_conditional_marginal, sample_mog)

LIN = DiffusionSchedule("linear")


def two_comp(shift=0.0):
    means = np.array([[-1.0, 0.3], [1.2, -0.5]]) + shift
    covs = np.stack([np.diag([0.04, 0.1]), np.array([[0.2, 0.05], [0.05, 0.1]])])
    return MoGSpec(means, covs, np.array([0.4, 0.6]))


def test_spec_validation():
    with pytest.raises(ValueError):
        MoGSpec(np.zeros((2, 2)), np.array([1.0, 1.0]), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        MoGSpec(np.zeros((2, 2)), np.array([1.0, -1.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        MoGSpec(np.zeros((2, 2)), np.ones(3), np.array([0.5, 0.5]))
    s = MoGSpec(np.zeros((2, 3)), np.array([0.5, 2.0]), np.array([0.5, 0.5]))
    np.testing.assert_array_equal(s.covs[1], 2.0 * np.eye(3))


@pytest.mark.parametrize("kind", ["linear", "vp", "subvp"])
def test_single_component_score(kind):
    sched = DiffusionSchedule(kind)
    mu = np.array([0.7, -0.2])
    spec = MoGSpec(mu[None], np.array([0.3]), np.ones(1))
    x = RngSource(0).normal((5, 2))
    for t in (0.1, 0.5, 0.9):
        a, s = float(sched.alpha(t)), float(sched.sigma(t))
        np.testing.assert_allclose(mog_score(spec, sched, x, t), -(x - a * mu) / (0.3 * a * a + s * s),
                                   rtol=1e-12)


def test_symmetric_score_zero():
    spec = MoGSpec(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([0.1, 0.1]), np.array([0.5, 0.5]))
    for t in (0.0, 0.3, 0.8):
        assert abs(mog_score(spec, LIN, np.zeros(2), t)[0]) < 1e-14


def test_score_finite_difference():
    spec = two_comp()
    r = RngSource(1)
    for t in (0.05, 0.4, 0.9):
        for x in r.normal((5, 2)):
            g = mog_score(spec, LIN, x, t)
            fd = np.array([(mog_log_density(spec, LIN, x + d, t) - mog_log_density(spec, LIN, x - d, t))
                           / 2e-6 for d in 1e-6 * np.eye(2)])
            assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) < 1e-5


def test_score_far_from_mass_is_finite():
    s = mog_score(latent_line_spec(), LIN, np.array([[200.0, -300.0]]), 0.01)
    assert np.all(np.isfinite(s))


@settings(max_examples=30, deadline=None)
@given(c=st.lists(st.floats(-5, 5), min_size=2, max_size=2), t=st.floats(0.0, 0.99),
       x=st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_score_translation_equivariant(c, t, x):
    c, x = np.array(c), np.array(x)
    a = float(LIN.alpha(t))
    # shifting data by c shifts the diffused density by alpha_t * c
    s0 = mog_score(two_comp(), LIN, x, t)
    s1 = mog_score(two_comp(c), LIN, x + a * c, t)
    np.testing.assert_allclose(s1, s0, rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("kind", ["linear", "vp"])
def test_mixture_identity(kind):
    sched = DiffusionSchedule(kind)
    spec = two_comp()
    x = RngSource(2).normal((20, 2))
    for t in (0.1, 0.5, 0.9):
        logp = np.stack([np.log(w) + mog_log_density(spec.component(k), sched, x, t)
                         for k, w in enumerate(spec.weights)], axis=1)
        post = np.exp(logp - logp.max(1, keepdims=True))
        post /= post.sum(1, keepdims=True)
        mixed = sum(post[:, [k]] * gt_conditional_velocity(spec, sched, k, x, t) for k in range(2))
        np.testing.assert_allclose(AnalyticMoGVelocity(spec, sched).velocity(x, t), mixed, atol=1e-8)


def test_conditional_velocity_at_mean():
    spec = two_comp()
    for t in (0.2, 0.6):
        a = float(LIN.alpha(t))
        for k in range(2):
            v = gt_conditional_velocity(spec, LIN, k, a * spec.means[k], t)
            np.testing.assert_allclose(v, float(LIN.dalpha(t)) * spec.means[k], atol=1e-12)


def test_conditional_velocity_continuity():
    # d/dt p + div(p v) = 0 for the single-component flow
    spec = two_comp().component(1)
    p = lambda x, t: np.exp(mog_log_density(spec, LIN, x, t))
    r = RngSource(3)
    h, dt = 1e-4, 1e-5
    for t in (0.3, 0.7):
        for x in r.normal((4, 2)):
            dp = (p(x, t + dt) - p(x, t - dt)) / (2 * dt)
            div = 0.0
            for i in range(2):
                e = h * np.eye(2)[i]
                flux = lambda z: p(z, t) * gt_conditional_velocity(spec, LIN, 0, z, t)[i]
                div += (flux(x + e) - flux(x - e)) / (2 * h)
            assert abs(dp + div) < 1e-6 * max(1.0, abs(dp))


def test_line_component_collapses():
    spec = latent_line_spec()
    model = AnalyticMoGVelocity(spec.component(1))
    x = euler_sample(model, RngSource(4).normal((200, 2)), 1000)
    # the line has std 1e-3 itself, so the bound applies to the typical sample
    dev = np.abs(x[:, 1] - 1.0)
    assert np.mean(dev) < 1e-3 and np.max(dev) < 5e-3


def test_identical_components_conditional_equals_marginal():
    mu = np.array([[0.5, -0.5], [0.5, -0.5]])
    spec = MoGSpec(mu, np.array([0.1, 0.1]), np.array([0.3, 0.7]))
    x = RngSource(5).normal((10, 2))
    for t in (0.2, 0.8):
        np.testing.assert_allclose(gt_conditional_velocity(spec, LIN, 0, x, t),
                                   AnalyticMoGVelocity(spec).velocity(x, t), atol=1e-12)
    with pytest.raises(ValueError):
        gt_conditional_velocity(spec, LIN, 2, x, 0.5)


def test_analytic_velocity_vjp():
    model = AnalyticMoGVelocity(two_comp())
    r = RngSource(6)
    x, u = r.normal(2), r.normal(2)
    for t in (0.1, 0.6):
        _, pull = model.forward(x, t)
        J = np.stack([(model.velocity(x + d, t) - model.velocity(x - d, t)) / 2e-6
                      for d in 1e-6 * np.eye(2)], axis=1)
        np.testing.assert_allclose(pull(u), J.T @ u, rtol=1e-6, atol=1e-8)


def test_angular_error_range():
    u = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
    v = np.array([[2.0, 4.0], [-1.0, -2.0], [1.0, 0.0]])
    a = angular_error(u, v)
    assert a[0] == pytest.approx(0.0, abs=1e-15) and a[1] == pytest.approx(2.0)
    assert np.isnan(a[2])


def test_gap_zero_weight_marginal():
    rep = gap_metrics(two_comp(), LIN, 0.0, [0.2, 0.5], n_points=200, conditional=False)
    np.testing.assert_array_equal(rep.mae, 0.0)
    np.testing.assert_allclose(rep.angular, 0.0, atol=1e-15)
    assert np.all(rep.angular >= 0) and np.all(rep.angular <= 2)
    assert [r[0] for r in rep.rows()] == [0.2, 0.5]
    with pytest.raises(ValueError):
        gap_metrics(two_comp(), LIN, 0.0, [])


def test_gap_peaks_at_intermediate_times():
    rep = gap_metrics(latent_line_spec(), LIN, 0.035, [0.05, 0.5], n_points=2000, rng=RngSource(0))
    assert rep.mae[1] >= 3 * rep.mae[0]


def test_latent_code_objective():
    obj = LatentCodeObjective(np.array([1.0, -1.0]))
    v, g = obj.value_and_grad(np.array([[0.0, 0.5], [2.0, -1.0]]))
    np.testing.assert_array_equal(v, [0.25, 0.0])
    np.testing.assert_array_equal(g, [[0.0, -1.0], [0.0, 0.0]])


def test_sampling_helpers():
    spec = latent_line_spec()
    X, lab = sample_mog(spec, 4000, RngSource(7), return_labels=True)
    assert marginal_ks(X, spec, 0) < 0.03
    assert off_support_fraction(X, spec) == 0.0
    assert off_support_fraction(np.array([[0.0, 0.0], [0.0, 1.01]]), spec) == 0.5
    Z = sample_conditional_marginal(spec, LIN, np.zeros(3000, int), 0.5, RngSource(8))
    np.testing.assert_allclose(Z.mean(0), 0.5 * spec.means[0], atol=0.05)
    rows = histogram_rows(X[:, 0], 20, (-2, 2))
    assert len(rows) == 20 and sum(c * (hi - lo) for lo, hi, c in rows) == pytest.approx(1.0, abs=0.01)


def test_posterior_mean_single_gaussian():
    spec = MoGSpec(np.array([[1.0, 2.0]]), np.array([0.5]), np.ones(1))
    x = np.array([0.3, -0.4])
    t = 0.5
    a, s = 0.5, 0.5
    expect = spec.means[0] + 0.5 * a / (0.5 * a * a + s * s) * (x - a * spec.means[0])
    np.testing.assert_allclose(mog_posterior_mean(spec, LIN, x, t), expect, rtol=1e-12)


def test_correlated_pipeline_smoke():
    cfg = CorrelatedMoGConfig(n_pairs=512, epochs=3, batch_size=256, n_eval=200, refine_iters=3,
                              dps_steps=20, eci_steps=10, teacher_steps=10)
    rep = correlated_mog_pipeline(cfg)
    assert set(rep["methods"]) == {"piddm_1", "piddm_ref", "dps", "eci", "vanilla"}
    assert rep["nfe"]["piddm_1"] == 1 and rep["nfe"]["dps"] == 20 and rep["nfe"]["eci"] == 10
    x = rep["samples"]["eci"]
    np.testing.assert_array_equal(x[:, 0], x[:, 1])
    assert not rep["errors"]
    assert correlated_mog_spec().covs[0, 0, 1] == pytest.approx(0.04 * 0.99999)
