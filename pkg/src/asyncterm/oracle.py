"""God-view instrumentation.

Everything here reads simulator state that no process can see: exact
residuals at arbitrary cuts, cross-process snapshot consistency, and the
empirical gap between approximate and exact residuals.  Protocol code never
imports this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .core import true_global_residual
from .detection import CONFIRMED, DISCARDED
from .engine import Contribution, Decision, Record


class EstimationFailed(RuntimeError):
    pass


@dataclass
class CutView:
    """One block per process, with the version each block had."""

    blocks: list
    stamps: list
    provenance: str

    def assemble(self) -> np.ndarray:
        return np.concatenate(self.blocks)


def cut_from_records(records) -> CutView:
    records = sorted(records, key=lambda r: r.owner)
    return CutView([r.own for r in records], [r.own_k for r in records], "snapshot")


def cut_from_contributions(contribs: dict) -> CutView:
    order = sorted(contribs)
    return CutView([contribs[i].block for i in order], [contribs[i].k for i in order], "pfait_round")


def cut_from_state(sim) -> CutView:
    return CutView([st.local_block.copy() for st in sim.procs], [st.k for st in sim.procs], "live_state")


def oracle_residual_at_cut(cut: CutView, problem, spec) -> float:
    if len(cut.blocks) != problem.p:
        raise ValueError(f"cut has {len(cut.blocks)} blocks, problem has {problem.p}")
    return true_global_residual(problem, spec, cut.assemble())


@dataclass
class Consistency:
    consistent: bool
    details: str | None = None

    def __bool__(self):
        return self.consistent


def check_snapshot_consistency(records, problem) -> Consistency:
    """Whether every recorded dependency equals what its owner recorded."""
    by_owner = {r.owner: r for r in records}
    for rec in sorted(records, key=lambda r: r.owner):
        for j in sorted(rec.deps):
            owner = by_owner[j]
            idx = problem.interfaces[(j, rec.owner)] - problem.blocks[j][0]
            seen, truth = rec.deps[j], owner.own[idx]
            if not np.array_equal(seen, truth):
                pos = int(np.flatnonzero(seen != truth)[0])
                return Consistency(False, f"block {j}: process {rec.owner} recorded version "
                                          f"{rec.dep_stamps.get(j)} vs owner's {owner.own_k} "
                                          f"(first difference at interface entry {pos})")
    return Consistency(True)


def stamp_gaps(records) -> dict:
    """``own_k of j - recorded stamp of j at i`` for every recorded dependency."""
    by_owner = {r.owner: r for r in records}
    return {(j, r.owner): by_owner[j].own_k - r.dep_stamps[j]
            for r in records for j in r.deps}


def reconstruction_gap_check(records, problem, displacements, tol=1e-12) -> list[str]:
    """Distance between recorded and owned interface values vs. stamp gap x step size.

    ``displacements[j][k]`` is the max-norm change of block ``j`` in its
    ``k+1``-th update.  Returns the violated pairs (empty when bounded).
    """
    by_owner = {r.owner: r for r in records}
    bad = []
    for rec in records:
        for j, seen in rec.deps.items():
            own = by_owner[j]
            lo, hi = sorted((rec.dep_stamps[j], own.own_k))
            idx = problem.interfaces[(j, rec.owner)] - problem.blocks[j][0]
            dist = float(np.max(np.abs(seen - own.own[idx]))) if idx.size else 0.0
            steps = displacements[j][lo:hi]
            bound = (hi - lo) * (max(steps) if steps else 0.0)
            if dist > bound * (1 + tol) + tol:
                bad.append(f"({j}->{rec.owner}) distance {dist:.3e} > {hi - lo} x step {bound:.3e}")
    return bad


@dataclass
class SnapshotSummary:
    epoch: int
    tick: int
    status: str
    r_approx: float
    r_cut: float
    consistent: bool
    max_gap: int
    terminate: bool
    gap_violations: int = 0


class GodView:
    """Observer plugged into a simulation; summarizes every decided round."""

    def __init__(self, problem, spec, detection, seed=0, keep_records=False):
        self.problem = problem
        self.spec = spec
        self.detection = detection
        self.seed = seed
        self.keep_records = keep_records
        self.records: dict = {}
        self.history: list[SnapshotSummary] = []
        self.kept: dict = {}
        self.contribs: dict = {}
        self.rounds: list = []
        self.final_cut: CutView | None = None
        self.final_records: list | None = None
        self.violations: list[dict] = []

    @property
    def is_snapshot(self) -> bool:
        return self.detection.protocol != "pfait"

    def notify(self, sim, i, action):
        if isinstance(action, Record):
            self.records.setdefault(action.record.epoch, {})[i] = action.record
        elif isinstance(action, Contribution):
            if action.key not in self.contribs:
                self.contribs = {action.key: {}}
            self.contribs[action.key][i] = action
        elif isinstance(action, Decision):
            if self.is_snapshot:
                self._decided_snapshot(sim, action)
            else:
                self._decided_round(sim, action)

    def _decided_snapshot(self, sim, d: Decision):
        got = self.records.pop(d.key)
        recs = [got[i] for i in sorted(got)]
        cut = cut_from_records(recs)
        r_cut = oracle_residual_at_cut(cut, self.problem, self.spec)
        gaps = stamp_gaps(recs)
        status = CONFIRMED if d.flag else DISCARDED
        if self.detection.protocol != "nfais":
            status = "complete"
        bad = reconstruction_gap_check(recs, self.problem, [st.displacements for st in sim.procs])
        self.history.append(SnapshotSummary(
            d.key, sim.now, status, d.value, r_cut,
            bool(check_snapshot_consistency(recs, self.problem)),
            max(gaps.values(), default=0), d.terminate, len(bad)))
        if self.keep_records:
            self.kept[d.key] = recs
        if d.terminate:
            self.final_cut = cut
            self.final_records = recs
            if not r_cut < self.detection.eps_target:
                self.violations.append({
                    "seed": self.seed, "tick": sim.now, "r_approx": d.value, "r_oracle": r_cut,
                    "c": self.detection.c if self.detection.protocol == "nfais" else 0.0,
                    "cut": cut.assemble().tolist()})

    def _decided_round(self, sim, d: Decision):
        self.rounds.append((d.key, d.value))
        if d.terminate:
            self.final_cut = cut_from_contributions(self.contribs[d.key])

    def c_samples(self, threshold) -> list[float]:
        """``|r(x_bar) - r~| / eps`` for every confirmed snapshot."""
        return [abs(s.r_cut - s.r_approx) / threshold
                for s in self.history if s.status in (CONFIRMED, "complete")]

    def write_violations(self, path):
        with open(path, "a") as fh:
            for v in self.violations:
                fh.write(json.dumps(v) + "\n")


@dataclass
class BoundEstimate:
    p: int
    m: int
    samples: list = field(default_factory=list)
    c_est: float = 0.0
    run_count: int = 0
    quantile: float | None = None

    def add(self, values):
        self.samples.extend(values)
        if self.samples:
            if self.quantile is None:
                self.c_est = float(max(self.samples))
            else:
                self.c_est = float(np.quantile(self.samples, self.quantile))


def estimate_c(config, run_count: int, seeds=None, quantile=None) -> BoundEstimate:
    """Measure ``c(p, m)`` by running an NFAIS scenario ``run_count`` times.

    ``config`` is a :class:`~asyncterm.runner.RunConfig`; its detection is
    forced to NFAIS with ``c = 0`` so every confirmed snapshot is sampled at
    the plain threshold.
    """
    from .runner import run  # runner imports this module

    if run_count < 1:
        raise ValueError("run_count must be >= 1")
    det = replace(config.detection, protocol="nfais", c=0.0, auto_threshold=False)
    seeds = list(range(run_count)) if seeds is None else list(seeds)[:run_count]
    est = BoundEstimate(config.problem.p, det.m, quantile=quantile)
    for seed in seeds:
        result = run(replace(config, detection=det, seed=seed, log_events=False))
        est.add(result.godview.c_samples(det.threshold))
        est.run_count += 1
    if not est.samples:
        raise EstimationFailed(f"no confirmed snapshot in {run_count} runs")
    return est
