"""Round-by-round FL simulation: selection, profiling, local SGD, aggregation, costs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import cost_model as cm
from .data_synth import LocalDataset
from .errors import ConfigError, ContractError, DegenerateError, NumericError
from .nn_core import Batch, CaptureSelector, Model, ModelSpec, default_selector, evaluate, \
    init_model, train_step
from .profiling import KlVariant, RepresentationProfile, generate_profile, profile_divergence
from .selection import STRATEGIES, ClientScore, Policy, RoundContext, next_selection, \
    optimal_alpha, score_client

log = logging.getLogger(__name__)

AGGREGATIONS = ("full", "partial", "momentum")


@dataclass
class FederationConfig:
    strategy: str = "fedprof"
    aggregation: Optional[str] = None  # None: the strategy's own rule
    C: float = 0.2
    T_max: int = 100
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 5e-3
    lr_decay: float = 0.994
    alpha: Union[float, str] = 10.0
    kl_variant: str = "canonical"
    capture: Optional[CaptureSelector] = None
    prox_mu: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    server_lr: float = 0.01
    adam_eps: float = 1e-3
    afl_temperature: float = 1.0
    target: Optional[float] = None
    stop_at_target: bool = False
    metric: str = "accuracy"
    power: cm.PowerModel = field(default_factory=cm.PowerModel)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}", "strategy.name")
        if self.aggregation is None:
            self.aggregation = STRATEGIES[self.strategy][1]
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}", "strategy.aggregation")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1", "training.local_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "training.batch_size")
        if not (isinstance(self.alpha, (int, float)) and self.alpha >= 0) and self.alpha != "optimal":
            raise ConfigError("alpha must be a non-negative number or 'optimal'", "strategy.alpha")

    @property
    def policy(self) -> Policy:
        return STRATEGIES[self.strategy][0]

    @property
    def uses_rp(self) -> bool:
        return self.policy is Policy.FEDPROF_SCORE

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "accuracy"

    def n_selected(self, n_clients: int) -> int:
        k = math.ceil(n_clients * self.C - 1e-12)
        if k < 1 or self.C <= 0:
            raise ConfigError("C must yield K >= 1", "training.C")
        return min(k, n_clients)


@dataclass
class ClientState:
    cid: int
    data: LocalDataset
    device: cm.DeviceSpec
    rho: float
    profile: Optional[RepresentationProfile] = None
    score: ClientScore = field(default_factory=ClientScore)
    cached: Optional[np.ndarray] = None
    last_loss: float = 0.0


@dataclass
class RoundTrace:
    round: int
    selected: list
    accuracy: float
    time_s: float
    energy_wh: dict
    scores: list
    failed: list = field(default_factory=list)

    @property
    def energy_wh_total(self) -> float:
        return sum(self.energy_wh[c] for c in sorted(self.energy_wh))


@dataclass
class ServerState:
    cfg: FederationConfig
    spec: ModelSpec
    model: Model
    clients: list
    validation: LocalDataset
    rng: np.random.Generator
    seed: int
    selector: CaptureSelector
    version: int = 0
    round: int = 0
    baselines: dict = field(default_factory=dict)
    adam_m: Optional[np.ndarray] = None
    adam_u: Optional[np.ndarray] = None
    ledger: cm.CostLedger = field(default_factory=cm.CostLedger)
    warnings: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.cfg.n_selected(len(self.clients))


def local_steps(n_samples: int, epochs: int, batch_size: int) -> int:
    return epochs * math.ceil(n_samples / batch_size)


def local_training(data: LocalDataset, model: Model, tau: int,
                   lr: Union[float, Callable[[int], float]], batch_size: int,
                   rng: np.random.Generator, prox_mu: float = 0.0):
    """Run ``tau`` SGD steps from ``model`` on ``data``; returns ``(model, mean loss)``.

    Batches come from successive seeded permutations of the local data. With
    ``prox_mu > 0`` the proximal term is anchored at the starting model.
    """
    if tau < 1:
        raise ContractError("local training needs tau >= 1 steps")
    n = len(data)
    anchor = model if prox_mu > 0 else None
    losses = []
    order = rng.permutation(n)
    pos = 0
    for step in range(tau):
        if pos >= n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        step_lr = lr(step) if callable(lr) else lr
        model, loss = train_step(
            model, Batch(data.features[idx], data.targets[idx]), step_lr,
            (prox_mu, anchor) if anchor is not None else None,
        )
        losses.append(loss)
    if not model.is_finite():
        raise NumericError("local model diverged", {"steps": tau})
    return model, float(np.mean(losses))


def aggregate_partial(models: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean of the selected clients' flat parameter vectors."""
    if len(models) == 0:
        raise ContractError("cannot aggregate an empty set of models")
    stack = np.stack([np.asarray(m, dtype=float) for m in models])
    # averaging offsets from the first model keeps identical inputs bit-exact
    return stack[0] + np.mean(stack - stack[0], axis=0)


def aggregate_full(cached: Sequence[np.ndarray], rho: Sequence[float]) -> np.ndarray:
    """``sum_k rho_k m_k`` over every client's latest cached model."""
    rho = np.asarray(rho, dtype=float)
    if len(cached) != rho.size:
        raise ConfigError(f"{len(cached)} cached models but {rho.size} weights")
    if abs(rho.sum() - 1.0) > 1e-9 or np.any(rho < 0):
        raise ConfigError(f"aggregation weights must be non-negative and sum to 1, got {rho.sum()}")
    stack = np.stack([np.asarray(m, dtype=float) for m in cached])
    return stack[0] + rho @ (stack - stack[0])


def fedadam_update(theta_prev, aggregate, m, u, beta1=0.9, beta2=0.99, server_lr=0.01, eps=1e-3):
    """Server-side Adam step on the pseudo-gradient ``aggregate - theta_prev``."""
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1) or eps <= 0:
        raise ConfigError("need beta1, beta2 in [0, 1) and eps > 0")
    delta = np.asarray(aggregate, dtype=float) - theta_prev
    m = beta1 * m + (1 - beta1) * delta
    u = beta2 * u + (1 - beta2) * delta * delta
    return theta_prev + server_lr * m / (np.sqrt(u) + eps), m, u


def init_state(cfg: FederationConfig, spec: ModelSpec, datasets: Sequence[LocalDataset],
               validation: LocalDataset, devices: Sequence[cm.DeviceSpec], seed: int) -> ServerState:
    if len(datasets) != len(devices) or not datasets:
        raise ContractError("need one device per client and at least one client")
    sizes = np.array([len(d) for d in datasets], dtype=float)
    rho = sizes / sizes.sum()
    model = init_model(spec, seed)
    flat = model.flat()
    clients = [
        ClientState(k, ds, dev, float(r), cached=flat.copy() if cfg.aggregation == "full" else None)
        for k, (ds, dev, r) in enumerate(zip(datasets, devices, rho))
    ]
    state = ServerState(
        cfg, spec, model, clients, validation,
        rng=np.random.default_rng([seed, 0x5E1]), seed=seed,
        selector=cfg.capture or default_selector(spec),
    )
    cfg.n_selected(len(clients))
    if cfg.aggregation == "momentum":
        state.adam_m = np.zeros_like(flat)
        state.adam_u = np.zeros_like(flat)
    if cfg.uses_rp:
        # initial profiles from every client, all at version 0
        for c in clients:
            c.profile = generate_profile(model, c.data, state.selector, 0, c.cid)
        state.baselines[0] = generate_profile(model, validation, state.selector, 0)
    return state


def _update_scores(state: ServerState, round_no: int):
    cfg = state.cfg
    for c in state.clients:
        base = state.baselines[c.profile.version]
        div = profile_divergence(c.profile, base, KlVariant(cfg.kl_variant))
        if cfg.alpha == "optimal":
            try:
                alpha = optimal_alpha(c.rho, div)
            except DegenerateError:
                alpha = 0.0
                msg = f"round {round_no}: client {c.cid} has zero divergence; uniform alpha used"
                if msg not in state.warnings:
                    state.warnings.append(msg)
        else:
            alpha = float(cfg.alpha)
        c.score = ClientScore(score_client(div, alpha), alpha, div, round_no, div < 0)


def _prune_baselines(state: ServerState):
    live = {c.profile.version for c in state.clients} | {state.version}
    for v in [v for v in state.baselines if v not in live]:
        del state.baselines[v]


def predicted_times(state: ServerState) -> list:
    msize = cm.model_size_mbit(state.spec.n_params)
    q = len(state.baselines[state.version]) if state.cfg.uses_rp else 0
    return [
        cm.client_times(c.device, len(c.data), state.cfg.local_epochs, msize, q, state.cfg.uses_rp)
        for c in state.clients
    ]


def run_round(state: ServerState):
    """Advance ``state`` by one round in place; returns ``(state, trace)``."""
    cfg = state.cfg
    round_no = state.round + 1
    if cfg.uses_rp:
        _update_scores(state, round_no)

    times = predicted_times(state)
    ctx = RoundContext(
        k=state.k,
        rng=state.rng,
        scores=[c.score.lam for c in state.clients] if cfg.uses_rp else None,
        data_sizes=[len(c.data) for c in state.clients],
        losses=[c.last_loss for c in state.clients],
        completion_times=[t.comm + t.train for t in times],
        temperature=cfg.afl_temperature,
    )
    selected = sorted(next_selection(cfg.policy, ctx))

    lr = cfg.lr * cfg.lr_decay ** (round_no - 1)
    prox_mu = cfg.prox_mu if cfg.strategy == "fedprox" else 0.0
    results, failed = {}, []
    for cid in selected:
        c = state.clients[cid]
        if cfg.uses_rp:
            c.profile = generate_profile(state.model, c.data, state.selector, state.version, cid)
        tau = local_steps(len(c.data), cfg.local_epochs, cfg.batch_size)
        rng = np.random.default_rng([state.seed, round_no, cid])
        try:
            local, loss = local_training(c.data, state.model, tau, lr, cfg.batch_size, rng, prox_mu)
        except NumericError as exc:
            log.debug("client %d failed in round %d: %s", cid, round_no, exc)
            failed.append(cid)
            continue
        c.last_loss = loss
        results[cid] = local.flat()

    theta = state.model.flat()
    if cfg.aggregation == "full":
        for cid, vec in results.items():
            state.clients[cid].cached = vec
        theta = aggregate_full([c.cached for c in state.clients], [c.rho for c in state.clients])
    elif results:
        agg = aggregate_partial([results[cid] for cid in sorted(results)])
        if cfg.aggregation == "momentum":
            theta, state.adam_m, state.adam_u = fedadam_update(
                theta, agg, state.adam_m, state.adam_u,
                cfg.adam_beta1, cfg.adam_beta2, cfg.server_lr, cfg.adam_eps,
            )
        else:
            theta = agg
    state.model = Model.from_flat(state.spec, theta)
    state.version = round_no
    state.round = round_no
    metric = evaluate(state.model, state.validation.as_batch(), cfg.metric)
    if cfg.uses_rp:
        state.baselines[round_no] = generate_profile(
            state.model, state.validation, state.selector, round_no
        )
        _prune_baselines(state)

    per_client = {cid: times[cid] for cid in selected}
    energies = {
        cid: cm.client_energy(per_client[cid], state.clients[cid].device, cfg.power, cfg.uses_rp)
        for cid in selected
    }
    t_round = cm.round_time([per_client[cid] for cid in selected], cfg.uses_rp)
    state.ledger.record(per_client, energies, t_round, cfg.uses_rp)
    trace = RoundTrace(
        round_no, selected, metric, t_round, energies,
        [c.score.lam for c in state.clients] if cfg.uses_rp else [],
        failed,
    )
    return state, trace


@dataclass
class SeedResult:
    seed: int
    traces: list
    best: float
    rounds_to_target: Optional[int]
    time_to_target_s: Optional[float]
    energy_to_target_wh: Optional[float]
    total_time_s: float
    total_energy_wh: float
    warnings: list = field(default_factory=list)
    error: Optional[str] = None
    final_params: Optional[np.ndarray] = None
    kinds: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "best_accuracy": self.best,
            "rounds_to_target": self.rounds_to_target,
            "time_to_target_s": self.time_to_target_s,
            "energy_to_target_wh": self.energy_to_target_wh,
            "total_time_s": self.total_time_s,
            "total_energy_wh": self.total_energy_wh,
            "rounds_run": len(self.traces),
            "warnings": list(self.warnings),
            "error": self.error,
        }


def _reached(value: float, target: float, higher_is_better: bool) -> bool:
    return value >= target if higher_is_better else value <= target


def summarize_traces(traces: Sequence[RoundTrace], cfg: FederationConfig, seed: int,
                     warnings=()) -> SeedResult:
    values = [t.accuracy for t in traces]
    best = (max(values) if cfg.higher_is_better else min(values)) if values else float("nan")
    hit = None
    if cfg.target is not None:
        hit = next((i for i, t in enumerate(traces)
                    if _reached(t.accuracy, cfg.target, cfg.higher_is_better)), None)
    rounds = time_s = energy = None
    if hit is not None:
        rounds = traces[hit].round
        time_s = sum(t.time_s for t in traces[: hit + 1])
        energy = sum(t.energy_wh_total for t in traces[: hit + 1])
    return SeedResult(
        seed, list(traces), best, rounds, time_s, energy,
        sum(t.time_s for t in traces), sum(t.energy_wh_total for t in traces), list(warnings),
    )


def run_seed(cfg: FederationConfig, spec: ModelSpec, datasets, validation, devices, seed: int,
             on_round: Optional[Callable] = None) -> SeedResult:
    state = init_state(cfg, spec, datasets, validation, devices, seed)
    traces = []
    for _ in range(cfg.T_max):
        state, trace = run_round(state)
        traces.append(trace)
        if on_round is not None:
            on_round(state, trace)
        if cfg.stop_at_target and cfg.target is not None and \
                _reached(trace.accuracy, cfg.target, cfg.higher_is_better):
            break
    result = summarize_traces(traces, cfg, seed, state.warnings)
    result.final_params = state.model.flat()
    result.kinds = [c.data.kind for c in state.clients]
    return result


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}


def summarize_seeds(results: Sequence[SeedResult]) -> dict:
    """Mean and population std across seeds; unreached targets are left out of the mean.

    ``n`` counts the seeds that contributed; a target nobody reached has mean ``None``.
    """
    ok = [r for r in results if r.error is None]
    return {
        "best_accuracy": _mean_std([r.best for r in ok]),
        "rounds_to_target": _mean_std([r.rounds_to_target for r in ok]),
        "time_to_target_s": _mean_std([r.time_to_target_s for r in ok]),
        "energy_to_target_wh": _mean_std([r.energy_to_target_wh for r in ok]),
        "total_time_s": _mean_std([r.total_time_s for r in ok]),
        "total_energy_wh": _mean_std([r.total_energy_wh for r in ok]),
        "per_seed": [r.as_dict() for r in results],
        "warnings": [w for r in results for w in r.warnings],
        "errors": [f"seed {r.seed}: {r.error}" for r in results if r.error],
    }


def run_experiment(cfg: FederationConfig, world_factory: Callable, seeds: Sequence[int]):
    """Run one strategy over ``seeds``.

    ``world_factory(seed)`` returns ``(spec, datasets, validation, devices)``.
    A failing seed is recorded in the summary and the other seeds continue.
    """
    results = []
    for seed in seeds:
        try:
            spec, datasets, validation, devices = world_factory(seed)
            results.append(run_seed(cfg, spec, datasets, validation, devices, seed))
        except Exception as exc:  # noqa: BLE001 - recorded per seed
            log.warning("seed %s aborted: %s", seed, exc)
            results.append(SeedResult(seed, [], float("nan"), None, None, None, 0.0, 0.0,
                                      error=f"{type(exc).__name__}: {exc}"))
    return results, summarize_seeds(results)


TRACE_HEADER = ["round", "time_s", "energy_wh_total", "accuracy", "selected_ids", "score_json"]


def trace_rows(traces: Sequence[RoundTrace]):
    for t in traces:
        yield [
            str(t.round),
            repr(float(t.time_s)),
            repr(float(t.energy_wh_total)),
            repr(float(t.accuracy)),
            ";".join(str(c) for c in t.selected),
            json.dumps([float(s) for s in t.scores]),
        ]
