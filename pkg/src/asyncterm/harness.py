"""Experiment sweeps, CSV reports and summary tables.

A sweep is a YAML file with nested sections; ``sweep`` maps dotted paths
(``detection.protocol``, ``problem.p``) to lists of values and the runner
executes the cartesian product of those points for every seed::

    name: demo
    master_seed: 2024
    seeds: [0, 1, 2]            # or {start: 0, count: 20}
    problem: {kind: linear, n: 64, p: 4, alpha: 0.5}
    detection: {protocol: pfait, eps: 1.0e-6}
    delivery: {mode: bounded, degree: 2}
    engine: {mode: async, max_events: 2000000}
    residual: {norm: max}
    sweep: {detection.protocol: [pfait, nfais, sbs]}
    estimate: {runs: 20, first_seed: 100000}
    table: {group_by: [protocol], stats: [min, max, mean]}
    output: {dir: results}
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from .core import ResidualSpec
from .detection import DetectionConfig, make_protocol, reconstruct
from .engine import CONFIRM, KINDS, MARKER, ConfigError, Decision, DeliveryModel, Record, Simulation
from .oracle import estimate_c
from .problems import LinearFixedPoint, algebraic_residual, build_linear, discretize_convdiff
from .runner import RunConfig, RunReport, run

WORKERS_ENV = "ASYNCTERM_WORKERS"

PROBLEM_KEYS = {
    "linear": {"kind", "n", "p", "alpha", "seed", "row_nnz"},
    "convdiff": {"kind", "nx", "nu", "velocity", "source", "dt", "partition", "p"},
}
DETECTION_KEYS = {f.name for f in fields(DetectionConfig)}
DELIVERY_KEYS = {"mode", "degree", "latency", "control_latency", "cross_kind_rule"}
ENGINE_KEYS = {"mode", "max_events", "max_sweeps", "fairness", "compute_time"}
RESIDUAL_KEYS = {"norm"}
ESTIMATE_KEYS = {"runs", "first_seed", "quantile"}
TABLE_KEYS = {"group_by", "stats"}
OUTPUT_KEYS = {"dir", "csv", "table", "overhead", "logs", "violations", "wall_time"}
SECTIONS = ("problem", "detection", "delivery", "engine", "residual")
STATS = ("min", "max", "mean")

# axes that define comparable groups in a table
AXES = ("problem", "protocol", "mode", "delivery", "p", "n", "m", "eps", "eps_target", "c")


def _check_keys(section: str, got: dict, allowed: set):
    extra = sorted(set(got) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


@dataclass
class ExperimentConfig:
    """Declarative sweep description; see the module docstring for the schema."""

    name: str = "experiment"
    master_seed: int = 0
    seeds: list = field(default_factory=lambda: [0])
    problem: dict = field(default_factory=lambda: {"kind": "linear", "n": 32, "p": 4, "alpha": 0.5})
    detection: dict = field(default_factory=dict)
    delivery: dict = field(default_factory=lambda: {"mode": "fifo"})
    engine: dict = field(default_factory=dict)
    residual: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    estimate: dict = field(default_factory=dict)
    table: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        _check_keys("top level", data, {f.name for f in fields(cls)})
        data = copy.deepcopy(data)
        seeds = data.get("seeds", [0])
        if isinstance(seeds, dict):
            _check_keys("seeds", seeds, {"start", "count"})
            seeds = list(range(int(seeds.get("start", 0)), int(seeds.get("start", 0)) + int(seeds["count"])))
        data["seeds"] = [int(s) for s in (seeds or [])]
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse configuration: {exc}") from exc
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def points(self) -> list[dict]:
        """Every sweep point as a full nested section dict."""
        axes = list(self.sweep)
        base = {s: copy.deepcopy(getattr(self, s)) for s in SECTIONS}
        out = []
        for combo in itertools.product(*(self.sweep[a] for a in axes)):
            point = copy.deepcopy(base)
            for path, value in zip(axes, combo):
                section, key = path.split(".", 1)
                point[section][key] = value
            point["axes"] = dict(zip(axes, combo))
            out.append(point)
        return out

    def validate(self):
        """Build every point's components once; raises before anything runs."""
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds contain duplicates")
        for path, values in self.sweep.items():
            if "." not in path or path.split(".", 1)[0] not in SECTIONS:
                raise ConfigError(f"sweep axis {path!r} must be <section>.<key> with section in {SECTIONS}")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep axis {path!r} needs a non-empty list")
        _check_keys("estimate", self.estimate, ESTIMATE_KEYS)
        _check_keys("table", self.table, TABLE_KEYS)
        _check_keys("output", self.output, OUTPUT_KEYS)
        for s in self.table.get("stats", []):
            if s not in STATS:
                raise ConfigError(f"unknown stat {s!r}; expected a subset of {STATS}")
        for point in self.points():
            build_point(point)


def _factor_partition(p: int) -> tuple[int, int]:
    qx = int(np.sqrt(p))
    while p % qx:
        qx -= 1
    return qx, p // qx


def problem_key(spec: dict) -> str:
    return json.dumps(spec, sort_keys=True)


@lru_cache(maxsize=32)
def _problem_cached(key: str):
    spec = json.loads(key)
    kind = spec.get("kind", "linear")
    if kind == "linear":
        return build_linear(int(spec["n"]), int(spec["p"]), float(spec["alpha"]),
                            seed=int(spec.get("seed", 0)), row_nnz=int(spec.get("row_nnz", 4)))
    partition = spec.get("partition")
    if partition is None:
        partition = _factor_partition(int(spec.get("p", 1)))
    elif "p" in spec and int(spec["p"]) != partition[0] * partition[1]:
        raise ConfigError(f"problem.p={spec['p']} disagrees with partition {partition}")
    kw = {k: spec[k] for k in ("nx", "nu", "source", "dt") if k in spec}
    if "velocity" in spec:
        kw["velocity"] = tuple(spec["velocity"])
    return discretize_convdiff(partition=tuple(partition), **kw)


def build_problem(spec: dict):
    kind = spec.get("kind", "linear")
    if kind not in PROBLEM_KEYS:
        raise ConfigError(f"unknown problem kind {kind!r}; expected one of {sorted(PROBLEM_KEYS)}")
    _check_keys("problem", spec, PROBLEM_KEYS[kind])
    try:
        return _problem_cached(problem_key(spec))
    except KeyError as exc:
        raise ConfigError(f"problem ({kind}) is missing {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid {kind} problem: {exc}") from exc


def build_residual(problem_spec: dict, spec: dict) -> ResidualSpec:
    _check_keys("residual", spec, RESIDUAL_KEYS)
    norm = spec.get("norm", "max")
    local_fn = algebraic_residual if problem_spec.get("kind") == "convdiff" else None
    try:
        return ResidualSpec(norm, local_fn=local_fn)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def build_delivery(spec: dict) -> DeliveryModel:
    _check_keys("delivery", spec, DELIVERY_KEYS)
    spec = dict(spec)
    for k in ("latency", "control_latency"):
        if k in spec:
            spec[k] = tuple(spec[k])
    return DeliveryModel(**spec)


def build_detection(spec: dict) -> DetectionConfig:
    _check_keys("detection", spec, DETECTION_KEYS)
    return DetectionConfig(**spec)


def build_point(point: dict, seed: int = 0):
    """RunConfig for one sweep point (``c`` may still be ``"estimate"``)."""
    problem = build_problem(point["problem"])
    engine = dict(point.get("engine", {}))
    _check_keys("engine", engine, ENGINE_KEYS)
    if engine.get("mode", "async") not in ("async", "sync"):
        raise ConfigError(f"engine.mode must be async or sync, got {engine['mode']!r}")
    if "compute_time" in engine:
        ct = engine["compute_time"]
        engine["compute_time"] = tuple(ct) if isinstance(ct[0], int) else [tuple(c) for c in ct]
    detection = build_detection(point.get("detection", {}))
    delivery = build_delivery(point.get("delivery", {}))
    if detection.protocol == "exs" and not delivery.is_fifo:
        raise ConfigError("exs needs FIFO links; use sbs or nfais for out-of-order delivery")
    return RunConfig(problem, detection, delivery,
                     residual=build_residual(point["problem"], point.get("residual", {})),
                     seed=seed, label=point["problem"].get("kind", "linear"), **engine)


def derive_seed(master: int, seed: int) -> int:
    """Per-run RNG seed from ``(master, seed)``; independent of sweep layout."""
    return int(np.random.SeedSequence(master, spawn_key=(seed,)).generate_state(1)[0])


# --- runs -----------------------------------------------------------------

@dataclass
class RunTask:
    index: int
    point: dict
    seed: int
    master: int
    log_dir: str | None = None
    violations: str | None = None


def _resolve_c(cfg: RunConfig, estimate: dict, master: int) -> RunConfig:
    if cfg.detection.c != "estimate":
        return cfg
    runs = int(estimate.get("runs", 20))
    first = int(estimate.get("first_seed", 100_000))
    seeds = [derive_seed(master, s) for s in range(first, first + runs)]
    est = estimate_c(cfg, runs, seeds=seeds, quantile=estimate.get("quantile"))
    det = replace(cfg.detection, c=est.c_est)
    return replace(cfg, detection=det)


_C_CACHE: dict = {}


def execute(task: RunTask, estimate: dict | None = None) -> dict:
    """Run one task; failures become a row with an ``error`` column."""
    row = {"index": task.index, "seed": task.seed}
    row.update({f"axis:{k}": v for k, v in task.point["axes"].items()})
    try:
        cfg = build_point(task.point, derive_seed(task.master, task.seed))
        if cfg.detection.c == "estimate":
            key = json.dumps({k: task.point[k] for k in SECTIONS}, sort_keys=True)
            if key not in _C_CACHE:
                _C_CACHE[key] = _resolve_c(cfg, estimate or {}, task.master).detection.c
            cfg = replace(cfg, detection=replace(cfg.detection, c=_C_CACHE[key]))
        cfg.log_events = task.log_dir is not None
        result = run(cfg)
        row.update(report_row(result.report))
        row["seed"] = task.seed
        row["run_seed"] = result.report.seed
        if task.log_dir:
            result.log.write(Path(task.log_dir) / f"run_{task.index:05d}.jsonl")
        row["violations"] = json.dumps(result.godview.violations) if result.godview.violations else ""
        row["error"] = ""
    except Exception as exc:  # recorded per run, the sweep goes on
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc(limit=3)
    return row


def worker_count(n_tasks: int) -> int:
    env = os.environ.get(WORKERS_ENV)
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def run_sweep(config: ExperimentConfig, log_dir=None, workers: int | None = None) -> list[dict]:
    """Every (point x seed) run, ordered by point then seed."""
    config.validate()
    tasks = [RunTask(n, point, seed, config.master_seed, None if log_dir is None else str(log_dir))
             for n, (point, seed) in enumerate((pt, s) for pt in config.points() for s in config.seeds)]
    if not tasks:
        return []
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    workers = worker_count(len(tasks)) if workers is None else max(1, min(workers, len(tasks)))
    if workers == 1:
        rows = [execute(t, config.estimate) for t in tasks]
    else:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(execute, tasks, itertools.repeat(config.estimate)))
    return sorted(rows, key=lambda r: r["index"])


# --- reports, CSV, tables ---------------------------------------------------

def report_row(report: RunReport, wall_time: bool = False) -> dict:
    row = {
        "problem": report.problem, "protocol": report.protocol, "mode": report.mode,
        "delivery": report.delivery, "p": report.p, "n": report.n, "m": report.m,
        "eps": report.eps, "eps_target": report.eps_target, "c": report.c,
        "seed": report.seed, "final_residual": report.final_residual,
        "protocol_residual": report.protocol_residual, "cut_residual": report.cut_residual,
        "k_max": report.k_max, "events": report.events, "ticks": report.ticks,
        "verdict": report.verdict, "snapshots": report.snapshots, "discarded": report.discarded,
    }
    for k in KINDS:
        row[f"msgs:{k}"] = report.messages[k]
        row[f"bytes:{k}"] = report.message_bytes[k]
    for k in (MARKER, CONFIRM):
        row[f"iface_bytes:{k}"] = report.interface_bytes[k]
    if wall_time:
        row["wall_time_nonnormative"] = report.wall_time
    return row


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return "" if v is None else str(v)


def _columns(rows) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols and k != "traceback":
                cols.append(k)
    return cols


def write_csv(rows, path=None) -> str:
    """CSV text (also written to ``path`` when given); floats use 17 digits."""
    buf = io.StringIO()
    cols = _columns(rows)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _parse(v: str):
    if v == "":
        return v
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def parse_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    return [{k: _parse(v) for k, v in row.items()} for row in reader]


def read_csv(path) -> list[dict]:
    return parse_csv(Path(path).read_text())


def _as_row(r) -> dict:
    return report_row(r) if isinstance(r, RunReport) else r


@dataclass
class Table:
    columns: list
    rows: list

    def to_csv(self) -> str:
        return write_csv([dict(zip(self.columns, r)) for r in self.rows])

    def to_text(self) -> str:
        cells = [self.columns] + [[_short(v) for v in r] for r in self.rows]
        widths = [max(len(c[n]) for c in cells) for n in range(len(self.columns))]
        lines = ["  ".join(c[n].rjust(widths[n]) for n in range(len(c))) for c in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.3e}"
    return str(v)


def emit_table(reports, group_by, stats=STATS) -> Table:
    """One row per group (ascending key) with r*, event and k_max summaries.

    Failed runs (non-empty ``error``) are counted but excluded from stats.
    Raises ConfigError when an axis not in ``group_by`` varies inside a group.
    """
    rows = [_as_row(r) for r in reports]
    if not rows:
        raise ConfigError("no reports to tabulate")
    group_by = list(group_by)
    stats = list(stats)
    for s in stats:
        if s not in STATS:
            raise ConfigError(f"unknown stat {s!r}; expected a subset of {STATS}")
    for g in group_by:
        if any(g not in r for r in rows):
            raise ConfigError(f"group-by column {g!r} missing from reports")
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[g] for g in group_by), []).append(r)
    columns = group_by + ["runs", "failed"]
    columns += [f"{s} r*" for s in stats]
    columns += ["mean events", "max k_max"]
    out = []
    for key in sorted(groups, key=lambda k: tuple((isinstance(v, str), v) for v in k)):
        members = groups[key]
        for axis in AXES:
            if axis in group_by:
                continue
            values = {_fmt(m.get(axis)) for m in members if not m.get("error")}
            if len(values) > 1:
                raise ConfigError(f"group {dict(zip(group_by, key))} mixes values of axis {axis!r}: "
                                  f"{sorted(values)}; add it to group_by")
        ok = [m for m in members if not m.get("error")]
        r_star = np.array([m["final_residual"] for m in ok], dtype=float)
        row = list(key) + [len(members), len(members) - len(ok)]
        for s in stats:
            row.append(float(getattr(np, s)(r_star)) if ok else float("nan"))
        row.append(float(np.mean([m["events"] for m in ok])) if ok else float("nan"))
        row.append(int(max(m["k_max"] for m in ok)) if ok else -1)
        out.append(row)
    return Table(columns, out)


def overhead_report(reports) -> Table:
    """Per-protocol message counts and snapshot bytes vs. the interface bytes they mirror."""
    rows = [_as_row(r) for r in reports if not _as_row(r).get("error")]
    groups: dict = {}
    for r in rows:
        groups.setdefault(r["protocol"], []).append(r)
    columns = ["protocol", "runs", "computation msgs", "marker msgs", "confirm msgs",
               "reduction msgs", "snapshot msgs", "marker bytes", "marker iface bytes"]
    out = []
    for proto in sorted(groups):
        g = groups[proto]
        tot = {c: sum(int(r[c]) for r in g) for c in g[0] if c.startswith(("msgs:", "bytes:", "iface_bytes:"))}
        out.append([proto, len(g), tot["msgs:computation"], tot[f"msgs:{MARKER}"],
                    tot[f"msgs:{CONFIRM}"], tot["msgs:reduction_fragment"],
                    tot[f"msgs:{MARKER}"] + tot[f"msgs:{CONFIRM}"],
                    tot[f"bytes:{MARKER}"], tot[f"iface_bytes:{MARKER}"]])
    return Table(columns, out)


def write_outputs(config: ExperimentConfig, rows: list[dict], out_dir=None) -> dict:
    """CSV, aligned table and overhead report under the configured directory."""
    out = config.output
    root = Path(out_dir or out.get("dir", "results"))
    root.mkdir(parents=True, exist_ok=True)
    if not out.get("wall_time", False):
        rows = [{k: v for k, v in r.items() if k != "wall_time_nonnormative"} for r in rows]
    paths = {"csv": root / out.get("csv", "runs.csv")}
    write_csv(rows, paths["csv"])
    ok = [r for r in rows if not r.get("error")]
    if ok:
        tcfg = config.table
        group_by = tcfg.get("group_by") or ["protocol"] + [a.split(".", 1)[1] for a in config.sweep
                                                            if a.split(".", 1)[1] in AXES and a != "detection.protocol"]
        table = emit_table(rows, group_by, tcfg.get("stats", STATS))
        paths["table"] = root / out.get("table", "table.txt")
        paths["table"].write_text(table.to_text())
        (root / "table.csv").write_text(table.to_csv())
        paths["overhead"] = root / out.get("overhead", "overhead.txt")
        paths["overhead"].write_text(overhead_report(rows).to_text())
    viol = [json.loads(r["violations"]) for r in rows if r.get("violations")]
    if viol:
        paths["violations"] = root / out.get("violations", "violations.jsonl")
        with open(paths["violations"], "w") as fh:
            for batch in viol:
                for v in batch:
                    fh.write(json.dumps(v) + "\n")
    return paths


# --- scripted replay ------------------------------------------------------

class _Collector:
    def __init__(self):
        self.actions = []

    def notify(self, sim, i, action):
        self.actions.append((sim.now, i, action))


def _replay_problem(spec: dict):
    if spec.get("kind") == "matrix":
        _check_keys("problem", spec, {"kind", "M", "c", "blocks"})
        M = np.asarray(spec["M"], dtype=float)
        blocks = [tuple(b) for b in spec.get("blocks", [(i, i + 1) for i in range(len(M))])]
        return LinearFixedPoint(M, np.asarray(spec["c"], dtype=float), blocks)
    return build_problem(spec)


def replay(trace: dict) -> dict:
    """Drive a scripted execution and return what every process recorded.

    ``trace`` holds ``problem`` (``kind: matrix`` with ``M``, ``c`` and
    ``blocks``, or any sweep problem), ``detection``, ``delivery``, optional
    ``x0`` and ``ops``; each op is one of ``{update: [i, ...]}``,
    ``{trigger: i}``, ``{deliver: [src, dst], count: n}``, ``{flush: true}`` or
    ``{settle: n}`` (up to ``n`` rounds of update-everyone-then-flush, until
    every process has stopped).
    """
    _check_keys("trace", trace, {"problem", "detection", "delivery", "x0", "ops", "residual"})
    problem = _replay_problem(trace["problem"])
    detection = build_detection(trace.get("detection", {"protocol": "exs"}))
    delivery = build_delivery(trace.get("delivery", {"mode": "fifo"}))
    spec = build_residual(trace["problem"], trace.get("residual", {}))
    collector = _Collector()
    sim = Simulation(problem, spec, make_protocol(detection), delivery, scripted=True,
                     keep_history=True, x0=trace.get("x0"), observer=collector)
    for n, op in enumerate(trace.get("ops", [])):
        if not isinstance(op, dict) or len(set(op) - {"count"}) != 1:
            raise ConfigError(f"op {n}: expected one of update/trigger/deliver/flush/settle, got {op!r}")
        if "update" in op:
            procs = op["update"]
            sim.scripted_update([procs] if isinstance(procs, int) else list(procs))
        elif "trigger" in op:
            sim.trigger(int(op["trigger"]))
        elif "deliver" in op:
            src, dst = op["deliver"]
            sim.deliver_link(int(src), int(dst), int(op.get("count", 1)))
        elif "flush" in op:
            sim.flush()
        elif "settle" in op:
            for _ in range(int(op["settle"])):
                if sim.all_stopped():
                    break
                sim.scripted_update(range(problem.p))
                sim.flush()
            else:
                raise ConfigError(f"op {n}: processes still active after {op['settle']} steps")
        else:
            raise ConfigError(f"op {n}: unknown operation {sorted(op)}")
    records = [a.record for _, _, a in collector.actions if isinstance(a, Record)]
    return {
        "records": [{
            "owner": r.owner, "epoch": r.epoch, "own": r.own.tolist(), "own_k": r.own_k,
            "deps": {str(j): v.tolist() for j, v in sorted(r.deps.items())},
            "dep_stamps": {str(j): s for j, s in sorted(r.dep_stamps.items())},
            "status": r.status, "local_value": r.local_value,
            "reconstruction": reconstruct(problem, r).tolist()} for r in records],
        "decisions": [{"tick": t, "key": a.key, "value": a.value, "flag": a.flag,
                       "terminate": a.terminate}
                      for t, _, a in collector.actions if isinstance(a, Decision)],
        "history": [[h.tolist() for h in st.history] for st in sim.procs],
        "iterations": [st.k for st in sim.procs],
        "stopped": sim.all_stopped(),
        "trace": [f"{t} p{i} {text}" for t, i, text in sim.trace],
        "log": sim.log.to_lines().splitlines(),
    }


__all__ = [
    "ExperimentConfig", "run_sweep", "emit_table", "overhead_report", "write_csv", "parse_csv",
    "read_csv", "write_outputs", "derive_seed", "build_point", "Table", "WORKERS_ENV", "replay",
]
