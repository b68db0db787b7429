"""Config-driven experiment runs: populations per seed, traces, summaries, figures."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence

import numpy as np

from . import report
from .config import ExperimentConfig
from .data_synth import make_population
from .diagnostics import normality_rejection_rate
from .federation import SeedResult, run_seed, summarize_seeds
from .nn_core import Model

log = logging.getLogger(__name__)

WORKERS_ENV = "FEDPROF_WORKERS"


def build_world(cfg: ExperimentConfig, seed: int):
    """Population, validation set, model spec and devices for one seed.

    Every strategy sees the same world for a given seed.
    """
    clients, validation = make_population(cfg.population_config(seed), cfg.noise_triples())
    devices = cfg.device_law().sample(len(clients), np.random.default_rng([seed, 0xDE71CE]))
    return cfg.model_spec(), clients, validation, devices


def run_job(cfg: ExperimentConfig, strategy: str, seed: int) -> SeedResult:
    fed = cfg.federation_config(strategy)
    try:
        spec, clients, validation, devices = build_world(cfg, seed)
        return run_seed(fed, spec, clients, validation, devices, seed)
    except Exception as exc:  # noqa: BLE001 - a failing seed must not stop the others
        log.warning("%s seed %d aborted: %s", strategy, seed, exc)
        return SeedResult(seed, [], float("nan"), None, None, None, 0.0, 0.0,
                          error=f"{type(exc).__name__}: {exc}")


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _diagnostics(cfg: ExperimentConfig, strategy: str, res: SeedResult) -> Optional[dict]:
    if res.final_params is None:
        return None
    spec, _, validation, _ = build_world(cfg, res.seed)
    fed = cfg.federation_config(strategy)
    model = Model.from_flat(spec, res.final_params)
    if len(validation) < 200 or spec.layer_sizes[fed.capture.layer + 1] < 2:
        return None
    rep = normality_rejection_rate(model, validation, fed.capture, 0.05)
    return {"strategy": strategy, "seed": res.seed, "layer": fed.capture.layer,
            "stage": fed.capture.stage, **rep.as_dict()}


def run(cfg: ExperimentConfig, out_dir=None, plot: Optional[bool] = None,
        strategies: Optional[Sequence[str]] = None, seeds: Optional[Sequence[int]] = None,
        workers: Optional[int] = None) -> dict:
    """Run every (strategy, seed) pair and write artifacts; returns the summary dict."""
    out = report.ensure_dir(out_dir or cfg.output.dir)
    plot = cfg.output.plot if plot is None else plot
    strategies = list(strategies or cfg.strategy.strategy_names)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    jobs = [(s, seed) for s in strategies for seed in seeds]
    workers = workers or _worker_count()

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_job, cfg, s, seed) for s, seed in jobs]
            results = [f.result() for f in futures]
    else:
        results = [run_job(cfg, s, seed) for s, seed in jobs]

    by_strategy: dict[str, list[SeedResult]] = {s: [] for s in strategies}
    for (s, _), res in zip(jobs, results):
        by_strategy[s].append(res)

    summary = {"metric": "accuracy" if cfg.population.n_classes >= 2 else "mse",
               "target": cfg.training.target, "seeds": seeds, "strategies": {}}
    diagnostics = []
    for s, res_list in by_strategy.items():
        summary["strategies"][s] = summarize_seeds(res_list)
        for res in res_list:
            report.write_trace_csv(out / f"trace_{s}_seed{res.seed}.csv", res.traces)
            if res.traces:
                report.emit_selection_histogram(
                    res.traces, res.kinds, out / f"selection_{s}_seed{res.seed}.csv",
                    out / f"selection_{s}_seed{res.seed}.svg" if plot else None,
                    title=f"{s}, seed {res.seed}",
                )
            if cfg.output.diagnostics:
                d = _diagnostics(cfg, s, res)
                if d is not None:
                    diagnostics.append(d)

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if diagnostics:
        (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2) + "\n")
    if plot:
        report.plot_accuracy(
            {s: [r.traces for r in rs] for s, rs in by_strategy.items()},
            out / "accuracy.svg", summary["metric"], cfg.training.target,
        )
    return summary
