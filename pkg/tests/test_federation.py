import numpy as np
import pytest

from fedprof import cost_model as cm
from fedprof.data_synth import LocalDataset, PopulationConfig, SizeLaw, make_population
from fedprof.errors import ConfigError, ContractError, StalenessError
from fedprof.federation import (FederationConfig, aggregate_full, aggregate_partial, fedadam_update,
                                init_state, local_training, run_experiment, run_round, run_seed,
                                trace_rows)
from fedprof.nn_core import ModelSpec, init_model, model_from_arrays
from fedprof.profiling import profile_divergence
from fedprof.selection import sample_with_replacement


def small_world(seed, n_clients=6, noise=()):
    cfg = PopulationConfig(n_clients=n_clients, n_classes=3, feature_dim=5,
                           size_law=SizeLaw(80, 10, 64), validation_size=200, seed=seed)
    clients, val = make_population(cfg, noise)
    devices = cm.DeviceLaw().sample(n_clients, np.random.default_rng(seed))
    return ModelSpec((5, 8, 3), ("relu",)), clients, val, devices


def fed(**kw):
    base = dict(T_max=4, local_epochs=1, batch_size=32, lr=0.05, C=0.5)
    base.update(kw)
    return FederationConfig(**base)


# --- local training ---------------------------------------------------------

def test_local_training_zero_lr(rng):
    spec, clients, _, _ = small_world(0)
    m = init_model(spec, 0)
    out, _ = local_training(clients[0], m, 1, 0.0, 16, rng)
    assert np.array_equal(out.flat(), m.flat())
    with pytest.raises(ContractError):
        local_training(clients[0], m, 0, 0.1, 16, rng)


def test_local_training_reaches_quadratic_minimizer():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 2))
    y = x @ np.array([[1.5], [-0.7]]) + 0.3 + 0.1 * rng.normal(size=(40, 1))
    design = np.hstack([x, np.ones((40, 1))])
    c_k = np.linalg.lstsq(design, y, rcond=None)[0].ravel()
    spec = ModelSpec((2, 1), (), "linear_mse")
    m = model_from_arrays(spec, [np.zeros((1, 2))], [np.zeros(1)])
    ds = LocalDataset(x, y)
    out, _ = local_training(ds, m, 4000, lambda t: 0.3 / (1 + t / 2000), 40, np.random.default_rng(0))
    assert np.max(np.abs(out.flat() - c_k)) < 1e-3


def test_local_training_deterministic():
    spec, clients, _, _ = small_world(1)
    m = init_model(spec, 2)
    a, la = local_training(clients[0], m, 10, 0.1, 16, np.random.default_rng([1, 2]))
    b, lb = local_training(clients[0], m, 10, 0.1, 16, np.random.default_rng([1, 2]))
    assert np.array_equal(a.flat(), b.flat()) and la == lb


# --- aggregation ------------------------------------------------------------

def test_partial_examples(rng):
    m = rng.normal(size=7)
    assert np.array_equal(aggregate_partial([m, m, m]), m)
    assert aggregate_partial([np.array([0.0]), np.array([2.0])])[0] == 1.0
    models = rng.normal(size=(5, 11))
    brute = [sum(models[i][j] for i in range(5)) / 5 for j in range(11)]
    assert np.allclose(aggregate_partial(list(models)), brute, atol=1e-15)
    with pytest.raises(ContractError):
        aggregate_partial([])


def test_full_examples(rng):
    m = rng.normal(size=4)
    assert np.allclose(aggregate_full([m] * 3, [0.2, 0.3, 0.5]), m)
    assert aggregate_full([np.array([0.0]), np.array([2.0])], [0.5, 0.5])[0] == 1.0
    models = rng.normal(size=(6, 9))
    rho = rng.dirichlet(np.ones(6))
    brute = [sum(rho[i] * models[i][j] for i in range(6)) for j in range(9)]
    assert np.allclose(aggregate_full(list(models), rho), brute, atol=1e-14)
    with pytest.raises(ConfigError):
        aggregate_full(list(models), rho[:5] / rho[:5].sum())
    with pytest.raises(ConfigError):
        aggregate_full(list(models), rho * 2)


def test_fedadam_examples():
    theta = np.array([1.0, -2.0])
    z = np.zeros(2)
    out, m, u = fedadam_update(theta, theta, z, z)
    assert np.array_equal(out, theta)
    out, _, _ = fedadam_update(np.array([0.0]), np.array([1.0]), np.zeros(1), np.zeros(1),
                               beta1=0.0, beta2=0.0, server_lr=1.0, eps=1e-8)
    assert out[0] == pytest.approx(1.0, abs=1e-7)


def test_fedadam_momentum_accumulates():
    theta, m, u = np.zeros(1), np.zeros(1), np.zeros(1)
    t1, m, u = fedadam_update(theta, theta + 1.0, m, u, beta1=0.9, beta2=0.99)
    t2, m, u = fedadam_update(t1, t1 + 1.0, m, u, beta1=0.9, beta2=0.99)
    assert abs(t2 - t1)[0] >= abs(t1 - theta)[0]


def test_lemma4_unbiased_partial_aggregation():
    rng = np.random.default_rng(0)
    n, k, d = 8, 3, 4
    v = rng.normal(size=(n, d))
    rho = rng.dirichlet(np.ones(n) * 2)
    draws = np.array([aggregate_partial(v[sample_with_replacement(rho, k, rng)]) for _ in range(10_000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - rho @ v) <= 3 * se)


def test_lemma5_variance_scales_inverse_k():
    rng = np.random.default_rng(1)
    n = 10
    v = rng.normal(size=(n, 3))
    rho = rng.dirichlet(np.ones(n))
    ks = [1, 2, 5, 10]
    variances = []
    for k in ks:
        agg = np.array([aggregate_partial(v[sample_with_replacement(rho, k, rng)]) for _ in range(20_000)])
        variances.append(np.sum(agg.var(axis=0)))
    slope = np.polyfit(np.log(ks), np.log(variances), 1)[0]
    assert -1.15 <= slope <= -0.85


# --- protocol ---------------------------------------------------------------

def test_c1_fedavg_lr0_keeps_model():
    world = small_world(2)
    res = run_seed(fed(strategy="fedavg", C=1.0, lr=0.0), *world, seed=0)
    assert np.array_equal(res.final_params, init_model(world[0], 0).flat())
    accs = {t.accuracy for t in res.traces}
    assert len(accs) == 1
    assert all(len(t.selected) == 6 for t in res.traces)


def test_single_client_round_time():
    spec, clients, val, devices = small_world(3, n_clients=1)
    cfg = fed(strategy="fedprof", C=0.2)
    res = run_seed(cfg, spec, clients, val, devices, 0)
    q = spec.layer_sizes[1]
    t = cm.client_times(devices[0], len(clients[0]), 1, cm.model_size_mbit(spec.n_params), q, True)
    for tr in res.traces:
        assert tr.selected == [0]
        assert tr.time_s == t.comm + t.train + t.rp


@pytest.mark.parametrize("strategy", ["fedavg", "cfcfm", "fedavg_rp", "fedprox", "fedadam", "afl", "fedprof"])
def test_runs_are_bit_identical(strategy):
    world = small_world(4)
    a = run_seed(fed(strategy=strategy, T_max=10), *world, seed=5)
    b = run_seed(fed(strategy=strategy, T_max=10), *world, seed=5)
    assert list(trace_rows(a.traces)) == list(trace_rows(b.traces))
    assert np.array_equal(a.final_params, b.final_params)


def test_selection_size_is_ceiling():
    assert fed(C=0.2).n_selected(11) == 3
    assert fed(C=0.1).n_selected(50) == 5
    with pytest.raises(ConfigError):
        fed(C=0.0).n_selected(10)


def test_profile_versions_track_rounds():
    world = small_world(5)
    state = init_state(fed(strategy="fedprof"), *world, seed=0)
    for _ in range(3):
        state, trace = run_round(state)
        for cid in trace.selected:
            assert state.clients[cid].profile.version == trace.round - 1
        # every cached profile still has its matching baseline
        for c in state.clients:
            profile_divergence(c.profile, state.baselines[c.profile.version])
    with pytest.raises(StalenessError):
        profile_divergence(state.clients[trace.selected[0]].profile, state.baselines[state.version])


def test_ledger_equals_trace_sums():
    world = small_world(6)
    state = init_state(fed(strategy="fedprof", T_max=6), *world, seed=1)
    traces = []
    for _ in range(6):
        state, t = run_round(state)
        traces.append(t)
    assert state.ledger.total_time_s == sum(t.time_s for t in traces)
    assert state.ledger.total_energy_wh == sum(t.energy_wh_total for t in traces)
    per_client = {}
    for t in traces:
        for c, e in t.energy_wh.items():
            per_client[c] = per_client.get(c, 0.0) + e
    assert per_client == state.ledger.energy_wh


def test_target_zero_hit_in_round_one():
    world = small_world(7)
    res = run_seed(fed(strategy="fedavg_rp", target=0.0), *world, seed=0)
    assert res.rounds_to_target == 1
    assert res.time_to_target_s == res.traces[0].time_s


def test_lr0_best_is_first_round_accuracy():
    world = small_world(8)
    for strategy in ("fedavg", "fedprof", "fedadam"):
        res = run_seed(fed(strategy=strategy, lr=0.0, server_lr=0.0), *world, seed=0)
        assert res.best == res.traces[0].accuracy


def test_unreached_target_reported_as_none():
    world = small_world(9)
    res = run_seed(fed(strategy="fedavg_rp", target=1.1), *world, seed=0)
    assert res.rounds_to_target is None


def test_multi_seed_summary_std():
    factory = lambda s: small_world(s)
    _, multi = run_experiment(fed(strategy="fedavg_rp"), factory, [0, 1, 2, 3, 4])
    assert multi["best_accuracy"]["n"] == 5 and multi["best_accuracy"]["std"] is not None
    _, single = run_experiment(fed(strategy="fedavg_rp"), factory, [0])
    assert single["best_accuracy"]["std"] == 0.0


def test_failing_seed_does_not_stop_others():
    def factory(seed):
        if seed == 1:
            raise RuntimeError("boom")
        return small_world(seed)

    results, summary = run_experiment(fed(strategy="fedavg_rp"), factory, [0, 1, 2])
    assert [r.error is None for r in results] == [True, False, True]
    assert summary["best_accuracy"]["n"] == 2
    assert "boom" in summary["errors"][0]


def test_diverging_client_marked_failed():
    spec, clients, val, devices = small_world(10)
    bad = clients[0]
    clients[0] = LocalDataset(bad.features * 1e154, bad.targets, bad.kind, 0)
    with np.errstate(all="ignore"):
        res = run_seed(fed(strategy="fedavg_rp", C=1.0, lr=10.0, T_max=2), spec, clients, val, devices, 0)
    assert 0 in res.traces[0].failed
    assert np.all(np.isfinite(res.final_params))


def test_optimal_alpha_zero_divergence_warns():
    spec, clients, val, devices = small_world(11)
    # a client holding exactly the validation data profiles identically to the baseline
    clients[2] = LocalDataset(val.features, val.targets, "clean", 2)
    res = run_seed(fed(strategy="fedprof", alpha="optimal", T_max=2), spec, clients, val, devices, 0)
    assert any("client 2" in w and "uniform alpha" in w for w in res.warnings)
