"""Batch experiment CLI: run, compare, calibrate, report.

Exit codes are a stable scripting contract: 0 success, 1 usage error,
2 invalid scenario, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .baselines import calibrate_dpp
from .experiments import (
    POLICY_NAMES,
    RunManifest,
    compare_runs,
    report_run,
    run_manifest,
)
from .model import ConfigError
from .scenario import load_scenario, save_dpp_params

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SCENARIO = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgellm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one policy over seeds")
    run.add_argument("--scenario", required=True)
    run.add_argument("--policy", choices=POLICY_NAMES, default=None)
    run.add_argument("--seeds", type=_parse_seeds, default=None)
    run.add_argument("--epochs", type=int, default=30)
    run.add_argument("--backend", choices=("scripted", "external"), default="scripted")
    run.add_argument("--out", required=True)

    cmp_ = sub.add_parser("compare", help="tabulate completed runs")
    cmp_.add_argument("runs", nargs="+", help="run output directories")
    cmp_.add_argument("--out", default=None)

    cal = sub.add_parser("calibrate", help="tune DPP parameters offline")
    cal.add_argument("--scenario", required=True)
    cal.add_argument("--iterations", type=int, default=5)
    cal.add_argument("--step-scale", type=float, default=1.0)
    cal.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="summarize one completed run")
    rep.add_argument("run", help="run output directory")
    rep.add_argument("--out", default=None)
    return parser


def _load(scenario_path: str):
    try:
        return load_scenario(scenario_path)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_IO)
    except ConfigError as exc:
        print("invalid scenario:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  - {violation}", file=sys.stderr)
        raise SystemExit(EXIT_SCENARIO)


def cmd_run(args) -> int:
    config = _load(args.scenario)
    manifest = RunManifest(
        scenario=args.scenario,
        policy=args.policy or config.policy,
        seeds=args.seeds if args.seeds is not None else [config.seed],
        epochs=args.epochs,
        out_dir=args.out,
        backend=args.backend,
    )
    try:
        manifest.validate()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        aggregate = run_manifest(manifest, config)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    obj = aggregate["objective"]["mean"]
    print(
        f"{manifest.policy}: objective={obj if obj is None else f'{obj:.4f}'} "
        f"f_norm={aggregate['f_norm']['mean']:.4f} "
        f"mean_latency={aggregate['mean_latency_s']['mean']:.1f}s "
        f"({len(manifest.seeds)} seed(s), {manifest.epochs} epoch(s))"
    )
    print(f"artifacts in {manifest.out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        table, scatter = compare_runs([Path(p) for p in args.runs])
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    header = ["policy", "mean_latency_s", "t_norm", "f_norm", "objective"]
    print("\t".join(header))
    for row in table:
        print(
            "\t".join(
                "" if row[k] is None else (f"{row[k]:.4f}" if isinstance(row[k], float) else str(row[k]))
                for k in header
            )
        )
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "comparison.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=header)
                writer.writeheader()
                writer.writerows(table)
            with open(out / "latency_fairness_scatter.csv", "w", newline="") as fh:
                writer = csv.DictWriter(
                    fh, fieldnames=["policy", "mean_latency_s", "f_norm"]
                )
                writer.writeheader()
                writer.writerows(scatter)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"tables in {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = _load(args.scenario)
    params, trajectory = calibrate_dpp(
        config, args.iterations, params=config.dpp, step_scale=args.step_scale
    )
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dpp_params(params, out)
        with open(out.with_suffix(".trajectory.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(trajectory[0].keys()))
            writer.writeheader()
            for row in trajectory:
                writer.writerow(
                    {k: (json.dumps(v) if isinstance(v, dict) else v) for k, v in row.items()}
                )
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(
        f"calibrated after {args.iterations} iteration(s): "
        f"lambda_churn={params.lambda_churn:.3f} kappa={params.kappa:.3f} "
        f"p1={params.p1:.3f} p2={params.p2:.3f} -> {args.out}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = report_run(Path(args.run))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"error: corrupt run artifacts ({exc})", file=sys.stderr)
        return EXIT_IO
    summary = report["summary"]
    if not report["mean_series"] and summary["objective"]["mean"] is None:
        print(f"{summary['policy']}: no data")
        return EXIT_OK
    print(f"policy: {summary['policy']}  seeds: {summary['seeds']}")
    for key in ("objective", "f_norm", "t_norm", "mean_latency_s"):
        entry = summary[key]
        if entry["mean"] is None:
            print(f"  {key}: no data")
        else:
            ci = entry["ci95"] if entry["ci95"] is not None else 0.0
            print(f"  {key}: {entry['mean']:.4f} +/- {ci:.4f}")
    print("objective by epoch:")
    for point in report["mean_series"]:
        print(f"  epoch {point['epoch']:>3}: {point['objective_mean']:.4f}")
    if args.out:
        try:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "objective_series.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["epoch", "seed", "objective"])
                writer.writerows(report["series"])
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"series in {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    handlers = {
        "run": cmd_run,
        "compare": cmd_compare,
        "calibrate": cmd_calibrate,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
