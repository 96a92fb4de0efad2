"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bcse, feeder as feeder_mod, pipeline
from .pipeline import ExperimentConfig, StageError


def _load_config(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = ExperimentConfig.from_yaml(path)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.outdir = args.out
    return cfg


def _cmd_estimate(args) -> int:
    """Standalone BCSE on a feeder file plus a measurement CSV."""
    import csv
    import numpy as np

    fdr = feeder_mod.load_feeder(args.feeder)
    st = feeder_mod.FeederStructure(fdr)
    by_step: dict[int, list[bcse.Measurement]] = {}
    with open(args.measurements, newline="") as f:
        reader = csv.DictReader(f)
        expected = {"step", "kind", "node", "value_re", "value_im", "weight"}
        if set(reader.fieldnames or []) != expected:
            print(f"estimate: expected CSV columns {sorted(expected)}", file=sys.stderr)
            return 1
        for row in reader:
            value = complex(float(row["value_re"]), float(row["value_im"] or 0.0))
            if row["kind"] in ("node_P", "node_Q"):
                value = float(row["value_re"])
            by_step.setdefault(int(row["step"]), []).append(
                bcse.Measurement(row["kind"], int(row["node"]), value, float(row["weight"]))
            )
    out = Path(args.output or "estimates.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "node", "vmag", "vang", "iterations", "objective"])
        for step in sorted(by_step):
            result = bcse.solve_wls(fdr, by_step[step], structure=st)
            for nid, v in zip(result.node_ids, result.voltages):
                w.writerow([step, nid, repr(float(abs(v))), repr(float(np.angle(v))),
                            result.iterations, repr(float(result.objective))])
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loadinfer",
        description="Hourly load inference for customers with only monthly bills, "
                    "plus distribution-feeder state estimation.",
    )
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--out", help="override output directory")
    sub = parser.add_subparsers(dest="command")
    for name, _ in pipeline.STAGES:
        sub.add_parser(name, help=f"run the {name} stage")
    sub.add_parser("run-all", help="run every stage in order")
    est = sub.add_parser("estimate-file", help="BCSE on a feeder + measurement CSV")
    est.add_argument("feeder", help="feeder JSON file")
    est.add_argument("measurements", help="measurement CSV")
    est.add_argument("--output", help="output CSV path")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "estimate-file":
            return _cmd_estimate(args)
        cfg = _load_config(args)
        if args.command == "run-all":
            result = pipeline.run_pipeline(cfg)
            print(f"pipeline complete: {result}")
            return 0
        for name, fn in pipeline.STAGES:
            if name == args.command:
                fn(cfg)
                print(f"stage {name} complete in {cfg.out()}")
                return 0
        parser.print_usage(sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StageError, Exception) as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
