"""Command-line entry point: ``fedprof run <config>`` and ``fedprof convergence``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import FedProfError

log = logging.getLogger("fedprof")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def cmd_run(args) -> int:
    from .config import parse_config
    from .experiment import run

    cfg = parse_config(args.config)
    strategies = [args.strategy] if args.strategy else None
    if strategies:
        # validate the override through the same rules as the file
        from .config import config_from_dict
        data = cfg.model_dump()
        data["strategy"] = {**data["strategy"], "name": args.strategy, "names": None}
        cfg = config_from_dict(data)
    summary = run(cfg, out_dir=args.out, plot=args.plot or None, strategies=strategies,
                  seeds=args.seeds)
    for name, s in summary["strategies"].items():
        best = s["best_accuracy"]
        rtt = s["rounds_to_target"]
        rounds = "-" if rtt["mean"] is None else f"{rtt['mean']:.1f}±{rtt['std']:.1f}"
        best_txt = "-" if best["mean"] is None else f"{best['mean']:.4f}±{best['std']:.4f}"
        print(f"{name:10s} best={best_txt} rounds_to_target={rounds}")
        for err in s["errors"]:
            print(f"  error: {err}", file=sys.stderr)
    return 0


def cmd_convergence(args) -> int:
    import numpy as np

    from . import report
    from .diagnostics import heterogeneous_world, loglog_slope, run_quadratic_convergence

    world = heterogeneous_world(args.clients, seed=args.world_seed)
    runs = [run_quadratic_convergence(world, args.tau, args.k, args.steps, s)
            for s in range(args.seeds)]
    steps = runs[0].steps
    mean_err = np.mean([r.errors for r in runs], axis=0)
    out = report.ensure_dir(args.out)
    result = {
        "clients": args.clients, "K": args.k, "tau": args.tau, "seeds": args.seeds,
        "gamma": runs[0].gamma, "mu": world.mu, "L": world.L,
        "noise_variance_bound": world.noise_variance_bound,
        "loglog_slope": loglog_slope(steps, mean_err, 100, args.steps),
        "steps": steps.tolist(), "mean_error": mean_err.tolist(),
    }
    (out / "convergence.json").write_text(json.dumps(result, indent=2) + "\n")
    report.plot_convergence(steps, mean_err, runs[0].gamma, out / "convergence.svg")
    print(f"log-log slope {result['loglog_slope']:.3f} over {args.seeds} seeds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprof", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--seeds", type=_seed_list, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--strategy", default=None)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_run)

    c = sub.add_parser("convergence", help="quadratic-world convergence harness")
    c.add_argument("--clients", type=int, default=10)
    c.add_argument("--k", type=int, default=3)
    c.add_argument("--tau", type=int, default=5)
    c.add_argument("--steps", type=int, default=10000)
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--world-seed", type=int, default=0)
    c.add_argument("--out", default="runs/convergence")
    c.set_defaults(func=cmd_convergence)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import ConfigError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ConfigError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FedProfError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
