"""Command-line entry points: benchmark runs, scans, tube precomputation.

Subcommands:
    run              execute the episode grid and write metrics + traces
    scan             angle/spin recoverable-region grid for the cart-pole
    tube-precompute  estimate and store tubes and invariant sets
    validate-lemma1  empirical coverage check of the box sample bound

Exit codes: 0 success, 1 episode-grid failure (any aborted episode or a
failed validation), 2 configuration errors.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    ConfigError,
    ScenarioConfig,
    emit_outputs,
    emit_scan_csv,
    prepare_caches,
    run_benchmark,
    stabilizable_region_scan,
)
from .tubes import validate_box_coverage


def _base_parser(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=str, default=None, help="YAML scenario config")
    sub.add_argument("--seed", type=int, default=None, help="replace the seed list")
    sub.add_argument("--out", type=str, default=None, help="output directory")
    sub.add_argument(
        "--mode",
        type=str,
        default=None,
        choices=["none", "nonrobust-mps", "rmps", "lrmps"],
        help="replace the mode list",
    )
    sub.add_argument("--jobs", type=int, default=None, help="parallel episode workers")


def _load_config(args) -> ScenarioConfig:
    config = ScenarioConfig.from_yaml(args.config) if args.config else ScenarioConfig()
    updates = {}
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if args.out is not None:
        updates["out_dir"] = args.out
    if getattr(args, "mode", None) is not None:
        updates["modes"] = (args.mode,)
    if args.jobs is not None:
        updates["jobs"] = args.jobs
    if updates:
        config = replace(config, **updates)
    return config


def _progress(done: int, total: int, result) -> None:
    status = "ok"
    if result.aborted:
        status = "aborted"
    elif not result.safe:
        status = "unsafe"
    elif result.goal_reached:
        status = "goal"
    print(
        f"[{done}/{total}] {result.environment}/{result.mode} "
        f"seed={result.seed} scenario={result.scenario}: {status}",
        file=sys.stderr,
    )


def cmd_run(args) -> int:
    config = _load_config(args)
    metrics, results = run_benchmark(config, progress=_progress if args.verbose else None)
    emit_outputs(metrics, results, config.out_dir, write_traces=config.write_traces)
    for m in metrics:
        print(
            f"{m.environment}/{m.mode}: safety={m.safety_rate:.3f} "
            f"goal={m.goal_rate:.3f} learned={m.learned_fraction:.3f} "
            f"episodes={m.episodes}"
        )
    print(f"metrics written to {Path(config.out_dir) / 'metrics.csv'}")
    return 1 if any(r.aborted for r in results) else 0


def cmd_scan(args) -> int:
    config = _load_config(args)
    rows = stabilizable_region_scan(config)
    out = Path(config.out_dir) / "scan.csv"
    emit_scan_csv(rows, out)
    nm = sum(r[2] for r in rows)
    lm = sum(r[3] for r in rows)
    print(f"scan: {len(rows)} cells, nonlinear-feasible={nm}, linear-feasible={lm}")
    print(f"scan data written to {out}")
    return 0


def cmd_tube_precompute(args) -> int:
    config = _load_config(args)
    prepare_caches(config)
    tube_dir = config.tube_dir or str(Path(config.out_dir) / "tubes")
    print(f"tube caches ready under {tube_dir}")
    return 0


def cmd_validate_lemma1(args) -> int:
    report = validate_box_coverage(
        n=args.dim,
        epsilon=args.epsilon,
        delta=args.delta,
        trials=args.trials,
        holdout=args.holdout,
        seed=args.seed if args.seed is not None else 0,
    )
    print(
        f"N={report['sample_count']} trials={report['trials']} "
        f"pass_fraction={report['pass_fraction']:.4f} "
        f"min_coverage={report['min_coverage']:.4f} "
        f"mean_coverage={report['mean_coverage']:.4f}"
    )
    ok = report["pass_fraction"] >= 1.0 - args.delta
    print("coverage bound " + ("holds" if ok else "VIOLATED") + " on this run")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rmps",
        description="Tube-verified model-predictive shielding benchmarks",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_run = subs.add_parser("run", help="run the benchmark episode grid")
    _base_parser(p_run)
    p_run.add_argument("--verbose", action="store_true", help="per-episode progress")
    p_run.set_defaults(func=cmd_run)

    p_scan = subs.add_parser("scan", help="cart-pole recoverable-region scan")
    _base_parser(p_scan)
    p_scan.set_defaults(func=cmd_scan)

    p_tube = subs.add_parser("tube-precompute", help="build tube/invariant caches")
    _base_parser(p_tube)
    p_tube.set_defaults(func=cmd_tube_precompute)

    p_val = subs.add_parser("validate-lemma1", help="empirical box-coverage check")
    p_val.add_argument("--dim", type=int, default=2)
    p_val.add_argument("--epsilon", type=float, default=0.2)
    p_val.add_argument("--delta", type=float, default=0.05)
    p_val.add_argument("--trials", type=int, default=200)
    p_val.add_argument("--holdout", type=int, default=10000)
    p_val.add_argument("--seed", type=int, default=None)
    p_val.set_defaults(func=cmd_validate_lemma1)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
