"""Command-line entry point: ``asyncterm {run,table,estimate-c,replay}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .core import ContractViolation
from .engine import ConfigError, ProtocolViolation
from .harness import (
    STATS, ExperimentConfig, build_point, derive_seed, emit_table, read_csv, replay, run_sweep,
    write_outputs,
)
from .oracle import EstimationFailed, estimate_c
from .problems import ConstructionError


def _csv_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    out_dir = Path(args.out or config.output.get("dir", "results"))
    log_dir = out_dir / "logs" if config.output.get("logs", False) else None
    rows = run_sweep(config, log_dir=log_dir, workers=args.workers)
    if not rows:
        print("no runs (empty seed list)")
        return 0
    paths = write_outputs(config, rows, out_dir)
    failed = [r for r in rows if r.get("error")]
    for r in failed:
        print(f"run {r['index']} (seed {r['seed']}) failed: {r['error']}", file=sys.stderr)
    if "table" in paths:
        print(paths["table"].read_text(), end="")
        print()
        print(paths["overhead"].read_text(), end="")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_table(args) -> int:
    rows = read_csv(args.reports)
    table = emit_table(rows, _csv_list(args.group_by), _csv_list(args.stats))
    if args.csv:
        Path(args.csv).write_text(table.to_csv())
    print(table.to_text(), end="")
    return 0


def cmd_estimate(args) -> int:
    config = ExperimentConfig.load(args.config)
    runs = args.runs or int(config.estimate.get("runs", 20))
    first = int(config.estimate.get("first_seed", 100_000))
    seeds = [derive_seed(config.master_seed, s) for s in range(first, first + runs)]
    out = []
    for point in config.points():
        cfg = build_point(point)
        est = estimate_c(cfg, runs, seeds=seeds, quantile=config.estimate.get("quantile"))
        out.append({"axes": point["axes"], "p": est.p, "m": est.m, "c_est": est.c_est,
                    "samples": len(est.samples), "runs": est.run_count})
        axes = " ".join(f"{k}={v}" for k, v in point["axes"].items())
        print(f"p={est.p} m={est.m} {axes} c_est={est.c_est:.6g} "
              f"({len(est.samples)} snapshots, {est.run_count} runs)".replace("  ", " "))
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2))
    return 0


def cmd_replay(args) -> int:
    trace = yaml.safe_load(Path(args.trace).read_text())
    if not isinstance(trace, dict):
        raise ConfigError("trace file must hold a mapping")
    result = replay(trace)
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))
    for line in result["trace"]:
        print(line)
    for rec in result["records"]:
        print(f"process {rec['owner']} epoch {rec['epoch']} recorded own@{rec['own_k']} "
              f"deps@{rec['dep_stamps']} -> {rec['reconstruction']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asyncterm",
                                     description="Termination detection for simulated asynchronous iterations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a sweep described by a YAML config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: output.dir or ./results)")
    p.add_argument("--workers", type=int, help="parallel runs (default: $ASYNCTERM_WORKERS or CPU count)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("table", help="summarize a runs CSV")
    p.add_argument("reports")
    p.add_argument("--group-by", default="protocol", help="comma-separated columns")
    p.add_argument("--stats", default=",".join(STATS), help="subset of min,max,mean")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("estimate-c", help="estimate the NFAIS bound constant per sweep point")
    p.add_argument("config")
    p.add_argument("--runs", type=int)
    p.add_argument("--out", help="write estimates as JSON")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("replay", help="replay a scripted trace (YAML or JSON)")
    p.add_argument("trace")
    p.add_argument("--out", help="write the replay result as JSON")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation, ProtocolViolation, ConstructionError,
            EstimationFailed, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"asyncterm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
