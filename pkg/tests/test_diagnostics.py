import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fedprof.diagnostics import (QuadraticWorld, chi2_2_quantile, heterogeneous_world, jarque_bera,
                                 jarque_bera_columns, loglog_slope, normality_rejection_rate,
                                 normality_report,
                                 run_quadratic_convergence)
from fedprof.errors import ContractError, DegenerateError
from fedprof.nn_core import Batch, CaptureSelector, ModelSpec, init_model


def test_chi2_quantile_matches_table():
    assert chi2_2_quantile(0.05) == pytest.approx(5.991, abs=1e-3)
    assert chi2_2_quantile(0.05) == pytest.approx(stats.chi2.ppf(0.95, 2), rel=1e-12)


def test_jb_matches_scipy(rng):
    for dist in (rng.normal(size=500), rng.exponential(size=300), rng.uniform(size=1000)):
        ours = jarque_bera(dist)
        assert ours.stat == pytest.approx(stats.jarque_bera(dist).statistic, rel=1e-10)
        assert ours.skew == pytest.approx(stats.skew(dist), rel=1e-10)
        assert ours.excess_kurtosis == pytest.approx(stats.kurtosis(dist), rel=1e-10)


def test_jb_columns_match_scalar(rng):
    x = rng.normal(size=(200, 5)) ** 3
    cols = jarque_bera_columns(x)
    assert np.allclose(cols, [jarque_bera(x[:, j]).stat for j in range(5)], rtol=1e-12)


def test_jb_normal_rarely_rejects():
    rejections = sum(jarque_bera(np.random.default_rng(s).normal(size=10_000)).reject_at(0.05)
                     for s in range(100))
    assert rejections <= 10


def test_jb_exponential_rejects():
    assert jarque_bera(np.random.default_rng(0).exponential(size=10_000)).reject_at(0.05)


def test_jb_constant_and_small():
    with pytest.raises(DegenerateError):
        jarque_bera(np.full(50, 3.0))
    with pytest.raises(ContractError):
        jarque_bera(np.arange(10.0))


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(0.01, 1e3), st.integers(0, 2**31 - 1))
def test_jb_affine_invariant(shift, scale, seed):
    x = np.random.default_rng(seed).gamma(2.0, size=200)
    base = jarque_bera(x).stat
    assert jarque_bera(shift + scale * x).stat == pytest.approx(base, rel=1e-6)


def _rate(model, x, sel):
    return normality_rejection_rate(model, Batch(x, np.zeros(len(x), dtype=int)), sel, 0.05).rate


def test_exact_normal_inputs_give_type_one_rate():
    rng = np.random.default_rng(0)
    model = init_model(ModelSpec((10, 2000, 2), ("relu",)), 1)
    x = rng.multivariate_normal(np.zeros(10), np.eye(10) + 0.3, size=1000)
    rate = _rate(model, x, CaptureSelector(0, "pre_activation"))
    assert 0.02 <= rate <= 0.10


def test_wide_layer_mixes_non_normal_inputs():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(1000, 512))
    model = init_model(ModelSpec((512, 64, 2), ("relu",)), 2)
    layer = _rate(model, x, CaptureSelector(0))
    baseline = normality_report(x, 0.05).rate
    assert layer < baseline


def test_relu_breaks_normality():
    rng = np.random.default_rng(2)
    model = init_model(ModelSpec((10, 200, 2), ("relu",)), 3)
    x = rng.normal(size=(1000, 10))
    pre = _rate(model, x, CaptureSelector(0, "pre_activation"))
    post = _rate(model, x, CaptureSelector(0, "post_activation"))
    assert post > pre


def test_fused_channels_are_reported():
    rng = np.random.default_rng(3)
    model = init_model(ModelSpec((10, 40, 2), ("relu",)), 3)
    rep = normality_rejection_rate(model, Batch(rng.normal(size=(500, 10)), np.zeros(500, int)),
                                   CaptureSelector(0, "post_activation", "sum_all", groups=4))
    assert rep.rejected.size == 4


def test_normality_needs_enough_samples(rng):
    model = init_model(ModelSpec((3, 20, 2)), 0)
    with pytest.raises(ContractError):
        normality_rejection_rate(model, Batch(rng.normal(size=(50, 3)), np.zeros(50, int)),
                                 CaptureSelector(0))


def test_degenerate_units_are_excluded(rng):
    x = rng.normal(size=(300, 4))
    x[:, 2] = 1.0
    rep = normality_report(x)
    assert rep.excluded == [2] and rep.rejected.size == 3


def test_single_client_gradient_descent_converges():
    world = QuadraticWorld(np.array([2.0]), np.array([[1.0, -3.0]]), np.array([1.0]))
    run = run_quadratic_convergence(world, tau=1, k=1, t_max=10_000, seed=0)
    assert np.all(np.diff(run.errors) <= 0)
    assert run.errors[-1] < 1e-6


def test_equal_optima_converge_to_zero():
    c = np.tile([[0.5, 2.0, -1.0]], (4, 1))
    world = QuadraticWorld(np.array([1.0, 2.0, 3.0, 4.0]), c, np.full(4, 0.25))
    assert np.allclose(world.theta_star, c[0])
    run = run_quadratic_convergence(world, tau=3, k=2, t_max=3000, seed=1)
    assert run.errors[-1] < 1e-8


def test_non_convex_world_rejected():
    with pytest.raises(ContractError):
        QuadraticWorld(np.array([1.0, -1.0]), np.zeros((2, 2)), np.array([0.5, 0.5]))


def test_theta_star_closed_form():
    world = heterogeneous_world(seed=3)
    grad = (world.rho * world.a) @ (world.theta_star - world.c)
    assert np.allclose(grad, 0.0, atol=1e-12)
    assert world.f_star <= world.objective(world.theta_star + 0.01)


@pytest.mark.slow
def test_convergence_slope_and_envelope():
    world = heterogeneous_world()
    runs = [run_quadratic_convergence(world, 5, 3, 10_000, s) for s in range(20)]
    steps = runs[0].steps
    mean_err = np.mean([r.errors for r in runs], axis=0)
    assert -loglog_slope(steps, mean_err, 100, 10_000) >= 0.8
    g = runs[0].gamma
    e400, e4000 = mean_err[steps == 400][0], mean_err[steps == 4000][0]
    assert e4000 <= e400 * (g + 400) / (g + 4000) * 2.0


def test_lemma3_divergence_bound():
    world = heterogeneous_world()
    tau = 5
    run = run_quadratic_convergence(world, tau, 3, 2000, 0, track_divergence=True)
    g = run.max_grad_norm
    # drop the entries recorded at synchronization steps
    local = np.arange(run.max_divergence.size) % tau != tau - 1
    bound = 4 * run.step_sizes[local] ** 2 * (tau - 1) ** 2 * g ** 2
    assert np.all(run.max_divergence[local] <= bound)
    assert run.noise_variance_bound == pytest.approx(5 * 0.5 ** 2 / 3)
