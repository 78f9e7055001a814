"""Single-run entry point: build a simulation, run it, report against the oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import ResidualSpec, true_global_residual
from .detection import DISCARDED, DetectionConfig, make_protocol
from .engine import KINDS, SNAPSHOT_KINDS, DeliveryModel, EventLog, Simulation
from .oracle import GodView, cut_from_state, oracle_residual_at_cut
from .problems import final_report_residual


@dataclass
class RunConfig:
    problem: object
    detection: DetectionConfig
    delivery: DeliveryModel = field(default_factory=DeliveryModel)
    residual: ResidualSpec = field(default_factory=ResidualSpec)
    mode: str = "async"
    seed: int = 0
    max_events: int = 2_000_000
    max_sweeps: int = 100_000
    fairness: int | None = None
    compute_time: tuple | list = (1, 3)
    x0: np.ndarray | None = None
    log_events: bool = True
    keep_iterates: bool = False
    keep_records: bool = False
    label: str = ""


@dataclass
class RunReport:
    """Flat per-run results; ``messages``/``message_bytes`` are keyed by envelope kind."""

    seed: int
    protocol: str
    mode: str
    eps: float
    eps_target: float
    c: float
    m: int
    delivery: str
    p: int
    n: int
    final_residual: float
    protocol_residual: float
    cut_residual: float
    k_max: int
    events: int
    ticks: int
    verdict: str
    snapshots: int
    discarded: int
    messages: dict
    message_bytes: dict
    interface_bytes: dict
    iterations: tuple = ()
    snapshot_history: list = field(default_factory=list)
    problem: str = ""
    wall_time: float = 0.0


@dataclass
class RunResult:
    report: RunReport
    log: EventLog
    trace: list
    godview: GodView
    sim: Simulation
    solution: np.ndarray


def delivery_label(model: DeliveryModel) -> str:
    return "fifo" if model.is_fifo else f"bounded{model.degree}"


def report_residual(problem, spec, x) -> float:
    """``||A x - b||_inf`` for linear systems, the fixed-point residual otherwise."""
    if hasattr(problem, "A") and hasattr(problem, "b"):
        return final_report_residual(problem, x)
    return true_global_residual(problem, spec, x)


def run(config: RunConfig) -> RunResult:
    """Run until the protocol terminates every process or ``max_events`` is hit."""
    started = time.perf_counter()
    problem, det = config.problem, config.detection
    protocol = make_protocol(det)
    god = GodView(problem, config.residual, det, seed=config.seed, keep_records=config.keep_records)
    sim = Simulation(problem, config.residual, protocol, config.delivery, seed=config.seed,
                     x0=config.x0, compute_time=config.compute_time, fairness=config.fairness,
                     log_events=config.log_events, keep_iterates=config.keep_iterates,
                     observer=god)
    if config.mode == "sync":
        def decide(local):
            folded = 0.0
            for v in local:
                folded = config.residual.combine(folded, v)
            value = config.residual.finalize(folded)
            return value, protocol.decide(value, True)

        verdict = sim.run_sync(config.max_sweeps, decide)
        solution = sim.delivered_blocks()
        protocol_residual = getattr(sim, "sync_value", float("nan"))
        cut_residual = protocol_residual
    elif config.mode == "async":
        verdict = sim.run_async(config.max_events)
        if verdict == "terminated" and god.final_cut is not None:
            cut = god.final_cut
        else:
            cut = cut_from_state(sim)
        cut_residual = oracle_residual_at_cut(cut, problem, config.residual)
        solution = cut.assemble() if god.is_snapshot and verdict == "terminated" else sim.delivered_blocks()
        values = set(sim.stop_values.values())
        protocol_residual = values.pop() if len(values) == 1 else float("nan")
    else:
        raise ValueError(f"unknown mode {config.mode!r}")
    iterations = tuple(st.k for st in sim.procs)
    report = RunReport(
        seed=config.seed, protocol=det.protocol, mode=config.mode, eps=det.threshold,
        eps_target=det.eps_target, c=det.c_value, m=det.m, delivery=delivery_label(config.delivery),
        p=problem.p, n=problem.n,
        final_residual=report_residual(problem, config.residual, solution),
        protocol_residual=protocol_residual, cut_residual=cut_residual,
        k_max=max(iterations), events=sim.events, ticks=sim.now, verdict=verdict,
        snapshots=len(god.history), discarded=sum(s.status == DISCARDED for s in god.history),
        messages={k: sim.stats[k][0] for k in KINDS},
        message_bytes={k: sim.stats[k][1] for k in KINDS},
        interface_bytes={k: sim.interface_bytes[k] for k in SNAPSHOT_KINDS},
        iterations=iterations,
        snapshot_history=[vars(s) for s in god.history],
        problem=config.label or type(problem).__name__,
        wall_time=time.perf_counter() - started)
    return RunResult(report, sim.log, sim.trace, god, sim, solution)
