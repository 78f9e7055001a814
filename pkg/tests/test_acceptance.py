"""Exit criteria of the build, each with its runtime budget.

Run with ``pytest -m acceptance``; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import hashlib
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from asyncterm.core import ResidualSpec
from asyncterm.detection import CONFIRMED, DISCARDED, DetectionConfig, make_protocol
from asyncterm.engine import DeliveryModel, Simulation
from asyncterm.harness import (
    ExperimentConfig, derive_seed, overhead_report, replay, run_sweep, write_outputs,
)
from asyncterm.oracle import estimate_c
from asyncterm.problems import (
    algebraic_residual, build_linear, direct_solve, discretize_convdiff, hybrid_relaxation_block,
)
from asyncterm.runner import RunConfig, run

pytestmark = pytest.mark.acceptance
criterion = pytest.mark.acceptance

TRACES = Path(__file__).resolve().parent.parent / "traces"
MASTER = 20240521

# event-log digests of every run above, replayed by the determinism check
DIGESTS: dict = {}


def digest(result) -> str:
    return hashlib.sha256(result.log.to_lines().encode()).hexdigest()


def remember(name, cfg, result):
    DIGESTS[name] = (cfg, digest(result))


def within(budget, start):
    elapsed = time.perf_counter() - start
    assert elapsed < budget, f"took {elapsed:.1f} s, budget {budget} s"


def exs_case(s):
    p = (2, 4, 8)[s % 3]
    alpha = (0.3, 0.9)[(s // 3) % 2]
    prob = build_linear(12 * p, p, alpha, seed=s)
    return RunConfig(prob, DetectionConfig("exs", eps=1e-8), DeliveryModel.fifo(latency=(1, 12)),
                     seed=derive_seed(MASTER, s), compute_time=(1, 6))


def sbs_case(s):
    prob = build_linear(40, 4 + s % 5, 0.8, seed=1000 + s)
    return RunConfig(prob, DetectionConfig("sbs", eps=1e-7), DeliveryModel.bounded(3, latency=(1, 15)),
                     seed=derive_seed(MASTER, 1000 + s))


def nfais_case():
    prob = build_linear(32, 4, 0.5, seed=3)
    return RunConfig(prob, DetectionConfig("nfais", eps=1e-6, m=2), DeliveryModel.bounded(2))


def convdiff_case(s):
    prob = discretize_convdiff(nx=24, partition=(2, 4))
    return RunConfig(prob, DetectionConfig("pfait", eps=1e-7, eps_target=1e-6),
                     DeliveryModel.bounded(2), residual=ResidualSpec("max", local_fn=algebraic_residual),
                     seed=derive_seed(MASTER, 3000 + s), label="convdiff")


@criterion(1, "trace fidelity of the two-process exact snapshot")
def test_criterion_1_trace_fidelity():
    start = time.perf_counter()
    out = replay(yaml.safe_load((TRACES / "exact_snapshot_two_process.yaml").read_text()))
    f1 = lambda a, b: 0.25 * a + 0.5 * b + 1.0
    f2 = lambda a, b: 0.5 * a + 0.25 * b + 1.0
    x1 = [0.0, f1(0.0, 0.0)]
    x2 = [0.0, f2(0.0, 0.0)]
    x1.append(f1(x1[1], x2[0]))
    expected = [x1[2], x2[1]]
    assert expected == [1.25, 1.0]
    recs = out["records"]
    assert len(recs) == 2
    assert all(r["reconstruction"] == expected for r in recs)
    h0, h1 = out["history"]
    assert [h0[2][0], h1[1][0]] == expected
    within(1, start)


@criterion(2, "exact snapshot consistency over 100 FIFO runs")
def test_criterion_2_exs_consistency():
    start = time.perf_counter()
    snapshots = 0
    for s in range(100):
        cfg = exs_case(s)
        res = run(cfg)
        assert res.report.verdict == "terminated", s
        for snap in res.godview.history:
            assert snap.consistent, (s, snap.epoch)
            assert abs(snap.r_approx - snap.r_cut) <= 1e-12 * snap.r_cut, (s, snap)
            snapshots += 1
        if s < 3:
            remember(f"exs{s}", cfg, res)
    assert snapshots >= 100
    within(60, start)


@criterion(3, "payload snapshot under bounded disorder 3, 100 runs")
def test_criterion_3_sbs_disorder():
    start = time.perf_counter()
    for s in range(100):
        cfg = sbs_case(s)
        res = run(cfg)
        rep = res.report
        assert rep.verdict == "terminated", s
        assert abs(rep.protocol_residual - rep.cut_residual) <= 1e-12 * rep.cut_residual, s
        assert rep.final_residual < cfg.detection.eps_target, s
        if s < 3:
            remember(f"sbs{s}", cfg, res)
    within(60, start)


@criterion(4, "approximate snapshot bound holds on a holdout batch")
def test_criterion_4_nfais_bound():
    start = time.perf_counter()
    base = nfais_case()
    eps_target = base.detection.eps
    est = estimate_c(base, 100, seeds=[derive_seed(MASTER, 4000 + s) for s in range(100)])
    assert 0 <= est.c_est < np.inf and est.run_count == 100
    det = replace(base.detection, c=est.c_est, eps_target=eps_target, auto_threshold=True)
    threshold = eps_target / (1 + est.c_est)
    checked, violations = 0, []
    for s in range(100):
        cfg = replace(base, detection=det, seed=derive_seed(MASTER, 5000 + s))
        res = run(cfg)
        assert res.report.verdict == "terminated", s
        for snap in res.godview.history:
            if snap.status == CONFIRMED and snap.r_approx < threshold:
                checked += 1
                if not snap.r_cut < eps_target:
                    violations.append((s, snap.r_approx, snap.r_cut))
        if s < 3:
            remember(f"nfais{s}", cfg, res)
    assert checked >= 100
    worst = [(s, (cut - approx) / threshold) for s, approx, cut in violations]
    assert violations == [], f"c_est={est.c_est:.3f} exceeded on holdout (seed, gap/eps): {worst}"
    within(120, start)


@criterion(5, "approximate snapshot discard then confirmed termination")
def test_criterion_5_nfais_discard():
    start = time.perf_counter()
    out = replay(yaml.safe_load((TRACES / "nfais_discard.yaml").read_text()))
    statuses = [r["status"] for r in out["records"]]
    first = statuses.index(DISCARDED)
    assert CONFIRMED in statuses[first + 1:]
    assert not out["decisions"][0]["flag"]
    final = out["decisions"][-1]
    assert final["terminate"] and final["flag"] and out["stopped"]
    within(5, start)


@criterion(6, "protocol-free detection on convection-diffusion, 20 seeds")
def test_criterion_6_pfait_convdiff():
    start = time.perf_counter()
    worst = 0.0
    for s in range(20):
        cfg = convdiff_case(s)
        res = run(cfg)
        assert res.report.verdict == "terminated", s
        worst = max(worst, res.report.final_residual)
        assert res.report.final_residual < 1e-6, (s, res.report.final_residual)
        if s == 0:
            remember("convdiff0", cfg, res)
    print(f"worst r* over 20 seeds: {worst:.3e}")
    within(600, start)


OVERHEAD = f"""
name: overhead
master_seed: {MASTER}
seeds: {{start: 0, count: 10}}
problem: {{kind: linear, n: 64, p: 8, alpha: 0.8, seed: 6}}
detection: {{protocol: pfait, eps: 1.0e-6}}
delivery: {{mode: bounded, degree: 2}}
sweep: {{detection.protocol: [pfait, sbs]}}
"""


@criterion(7, "snapshot message overhead against protocol-free detection")
def test_criterion_7_overhead(tmp_path):
    start = time.perf_counter()
    cfg = ExperimentConfig.loads(OVERHEAD)
    rows = run_sweep(cfg, workers=1)
    assert all(r["error"] == "" and r["verdict"] == "terminated" for r in rows)
    report = overhead_report(rows)
    print(report.to_text())
    by = {r[0]: dict(zip(report.columns, r)) for r in report.rows}
    assert by["pfait"]["snapshot msgs"] == 0
    assert by["sbs"]["marker msgs"] > 0
    assert by["sbs"]["marker bytes"] == by["sbs"]["marker iface bytes"] > 0
    for r in rows:
        assert r["eps_target"] == 1e-6 and r["final_residual"] < 1e-6
    paths = write_outputs(cfg, rows, tmp_path / "first")
    DIGESTS["overhead_csv"] = (cfg, Path(paths["csv"]).read_bytes())
    within(120, start)


@criterion(8, "synchronous mode equals the sequential iteration bit for bit")
def test_criterion_8_sync_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(MASTER)
    for s in range(50):
        n = int(rng.integers(10, 80))
        p = int(rng.integers(1, min(n, 12) + 1))
        prob = build_linear(n, p, float(rng.uniform(0.5, 0.95)), seed=8000 + s)
        sim = Simulation(prob, ResidualSpec(), make_protocol(DetectionConfig("pfait")),
                         DeliveryModel.fifo(), keep_iterates=True)
        # never terminate, so an exact floating-point fixed point does not end the run early
        assert sim.run_sync(100, lambda local: (max(local), False)) == "timeout"
        assert len(sim.iterates) == 101, s
        x = np.zeros(n)
        for k in range(1, 101):
            x = prob.M @ x + prob.c
            assert np.array_equal(sim.iterates[k], x), (s, k)
    within(60, start)


def reference_gauss_seidel(A, b, x):
    x = x.copy()
    for r in range(A.shape[0]):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        s, d = 0.0, 0.0
        for c, v in zip(A.indices[lo:hi], A.data[lo:hi]):
            if c == r:
                d = v
            else:
                s += v * x[c]
        x[r] = (b[r] - s) / d
    return x


@criterion(9, "benchmark relaxation and synchronous solve")
def test_criterion_9_benchmark():
    start = time.perf_counter()
    single = discretize_convdiff(nx=8, partition=(1, 1))
    x = np.random.default_rng(9).normal(size=single.n)
    assert np.array_equal(hybrid_relaxation_block(single, 0, x),
                          reference_gauss_seidel(single.A, single.b, x))
    for nx in (8, 16):
        prob = discretize_convdiff(nx=nx, partition=(2, 2))
        res = run(RunConfig(prob, DetectionConfig("pfait", eps=1e-9), mode="sync",
                            residual=ResidualSpec("max", local_fn=algebraic_residual)))
        assert res.report.verdict == "terminated"
        err = np.max(np.abs(res.solution - direct_solve(prob)))
        assert err <= 1e-8, (nx, err)
    within(120, start)


@criterion(10, "repeat runs give identical event logs and CSV")
def test_criterion_10_determinism(tmp_path):
    if not DIGESTS:
        # run alone: take baselines here
        for name, cfg in (("exs0", exs_case(0)), ("sbs0", sbs_case(0))):
            remember(name, cfg, run(cfg))
        cfg = ExperimentConfig.loads(OVERHEAD)
        rows = run_sweep(cfg, workers=1)
        DIGESTS["overhead_csv"] = (cfg, Path(write_outputs(cfg, rows, tmp_path / "base")["csv"]).read_bytes())
    for name, (cfg, expected) in DIGESTS.items():
        if name == "overhead_csv":
            rows = run_sweep(cfg, workers=2)
            again = Path(write_outputs(cfg, rows, tmp_path / "again")["csv"]).read_bytes()
            assert again == expected, name
        else:
            assert digest(run(cfg)) == expected, name
