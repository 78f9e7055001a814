import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from asyncterm.cli import main
from asyncterm.engine import ConfigError
from asyncterm.harness import (
    ExperimentConfig, derive_seed, emit_table, parse_csv, replay, run_sweep, worker_count,
    write_csv, write_outputs,
)

TRACES = Path(__file__).resolve().parent.parent / "traces"

SMALL = """
name: small
master_seed: 7
seeds: [0, 1]
problem: {kind: linear, n: 24, p: 4, alpha: 0.6}
detection: {protocol: pfait, eps: 1.0e-6}
delivery: {mode: bounded, degree: 2}
"""


def small(**overrides):
    cfg = ExperimentConfig.loads(SMALL)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# --- configuration ------------------------------------------------------------

def test_config_roundtrip():
    cfg = small(sweep={"detection.protocol": ["pfait", "sbs"]})
    back = ExperimentConfig.loads(cfg.dumps())
    assert back == cfg
    assert len(back.points()) == 2


def test_seed_range_form():
    cfg = ExperimentConfig.from_dict({"seeds": {"start": 3, "count": 4}})
    assert cfg.seeds == [3, 4, 5, 6]


@pytest.mark.parametrize("text,needle", [
    ("detection: {protocol: pfait, epsilon: 1.0e-6}", "epsilon"),
    ("problem: {kind: linear, n: 8, p: 2, alpha: 0.5, size: 3}", "size"),
    ("colour: blue", "colour"),
    ("delivery: {mode: bounded, degree: 2, jitter: 1}", "jitter"),
    ("sweep: {detection.protocol: [pfait, nope]}", "nope"),
    ("problem: {kind: spheres}", "spheres"),
])
def test_unknown_keys_rejected_before_running(text, needle):
    with pytest.raises(ConfigError, match=needle):
        ExperimentConfig.loads(text)


def test_exs_rejected_on_disorder():
    with pytest.raises(ConfigError, match="FIFO"):
        ExperimentConfig.loads(SMALL.replace("pfait", "exs"))


def test_empty_seed_list():
    cfg = small(seeds=[])
    assert run_sweep(cfg) == []


def test_derive_seed_depends_on_both():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(1, 2), derive_seed(1, 3), derive_seed(2, 2)}) == 3


# --- tables -----------------------------------------------------------------

def fake_rows(ps, protocol="pfait"):
    return [{"protocol": protocol, "problem": "linear", "mode": "async", "delivery": "fifo",
             "p": p, "n": 64, "m": 2, "eps": 1e-6, "eps_target": 1e-6, "c": 0.0,
             "final_residual": 1e-7 * (k + 1), "events": 100 + k, "k_max": 10 + k, "error": ""}
            for k, p in enumerate(ps)]


def test_groups_ascending():
    table = emit_table(fake_rows([16, 4, 8, 4]), ["p"])
    assert [r[0] for r in table.rows] == [4, 8, 16]
    assert table.columns[:3] == ["p", "runs", "failed"]


def test_single_run_min_equals_max():
    table = emit_table(fake_rows([4]), ["protocol"], ["min", "max", "mean"])
    row = dict(zip(table.columns, table.rows[0]))
    assert row["min r*"] == row["max r*"] == row["mean r*"] == 1e-7


def test_mixed_axis_named():
    with pytest.raises(ConfigError, match="'p'"):
        emit_table(fake_rows([4, 8]), ["protocol"])


def test_failed_runs_counted_not_summarized():
    rows = fake_rows([4, 4])
    rows[1]["error"] = "DivergenceError: boom"
    row = dict(zip(*[emit_table(rows, ["p"]).columns, emit_table(rows, ["p"]).rows[0]]))
    assert row["runs"] == 2 and row["failed"] == 1 and row["max r*"] == 1e-7


def test_unknown_stat():
    with pytest.raises(ConfigError):
        emit_table(fake_rows([4]), ["p"], ["median"])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=8))
def test_csv_float_roundtrip(values):
    rows = [{"k": n, "x": v, "tag": "a"} for n, v in enumerate(values)]
    back = parse_csv(write_csv(rows))
    assert [float(r["x"]) for r in back] == values
    assert [r["k"] for r in back] == list(range(len(values)))


# --- sweeps -----------------------------------------------------------------

def test_sweep_protocol_axis_groups(tmp_path):
    cfg = small(sweep={"detection.protocol": ["pfait", "nfais", "sbs"]})
    rows = run_sweep(cfg, workers=1)
    assert len(rows) == 6 and all(r["error"] == "" for r in rows)
    assert all(r["verdict"] == "terminated" for r in rows)
    paths = write_outputs(cfg, rows, tmp_path)
    table = parse_csv((tmp_path / "table.csv").read_text())
    assert [t["protocol"] for t in table] == ["nfais", "pfait", "sbs"]
    assert "marker msgs" in paths["overhead"].read_text()


def test_sweep_point_isolation():
    base = small(seeds=[0], sweep={"problem.alpha": [0.3, 0.6, 0.8]})
    changed = small(seeds=[0], sweep={"problem.alpha": [0.3, 0.7, 0.8]})
    a, b = run_sweep(base, workers=1), run_sweep(changed, workers=1)
    for n in (0, 2):
        assert {k: v for k, v in a[n].items() if k != "wall_time_nonnormative"} == \
               {k: v for k, v in b[n].items() if k != "wall_time_nonnormative"}
    assert a[1]["final_residual"] != b[1]["final_residual"]


def test_csv_byte_identical(tmp_path):
    cfg = small(sweep={"detection.protocol": ["pfait", "nfais"]})
    write_outputs(cfg, run_sweep(cfg, workers=1), tmp_path / "a")
    write_outputs(cfg, run_sweep(cfg, workers=2), tmp_path / "b")
    for name in ("runs.csv", "table.csv", "table.txt", "overhead.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_failure_is_a_row():
    cfg = small(seeds=[0], engine={"max_events": 10})
    cfg.problem = {"kind": "linear", "n": 24, "p": 4, "alpha": 0.6}
    rows = run_sweep(cfg, workers=1)
    assert rows[0]["verdict"] == "timeout"
    cfg.detection = {"protocol": "pfait", "eps": -1.0}
    with pytest.raises(ConfigError):
        cfg.validate()


def test_worker_env(monkeypatch):
    monkeypatch.setenv("ASYNCTERM_WORKERS", "3")
    assert worker_count(10) == 3
    assert worker_count(2) == 2
    monkeypatch.setenv("ASYNCTERM_WORKERS", "1")
    assert worker_count(10) == 1


def test_estimate_c_resolved_once():
    cfg = small(seeds=[0, 1], estimate={"runs": 4, "first_seed": 500})
    cfg.detection = {"protocol": "nfais", "eps": 1e-6, "m": 2, "c": "estimate", "auto_threshold": True}
    rows = run_sweep(cfg, workers=1)
    assert rows[0]["c"] == rows[1]["c"] and rows[0]["c"] >= 0
    assert rows[0]["error"] == "" and rows[0]["eps_target"] == 1e-6
    assert rows[0]["eps"] == pytest.approx(1e-6 / (1 + rows[0]["c"]), rel=1e-15)


# --- replay -------------------------------------------------------------------

def test_replay_trace_file():
    trace = yaml.safe_load((TRACES / "exact_snapshot_two_process.yaml").read_text())
    out = replay(trace)
    recon = [r["reconstruction"] for r in out["records"]]
    assert len(recon) == 2 and recon[0] == recon[1] == [1.25, 1.0]


def test_replay_rejects_bad_op():
    with pytest.raises(ConfigError):
        replay({"problem": {"kind": "matrix", "M": [[0.0]], "c": [1.0]}, "ops": [{"jump": 1}]})


# --- command line -------------------------------------------------------------

def test_cli_run_and_table(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(SMALL + "sweep: {problem.p: [2, 4]}\n")
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "out"), "--workers", "1"]) == 0
    out = capsys.readouterr().out
    assert "max r*" in out and "marker msgs" in out
    csv_path = tmp_path / "out" / "runs.csv"
    assert main(["table", str(csv_path), "--group-by", "protocol,p", "--stats", "max",
                 "--csv", str(tmp_path / "t.csv")]) == 0
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "protocol,p,runs,failed,max r*,mean events,max k_max"
    assert [line.split(",")[1] for line in lines[1:]] == ["2", "4"]


def test_cli_empty_seeds(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(SMALL.replace("seeds: [0, 1]", "seeds: []"))
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "out")]) == 0
    assert "no runs" in capsys.readouterr().out


@pytest.mark.parametrize("body", ["detection: {protocol: pfait, tolerance: 1}", "problem: [1, 2", "- 3"])
def test_cli_bad_config_exit_code(tmp_path, capsys, body):
    cfg_path = tmp_path / "bad.yaml"
    cfg_path.write_text(body)
    assert main(["run", str(cfg_path)]) == 2
    assert "asyncterm run:" in capsys.readouterr().err


def test_cli_missing_file(capsys):
    assert main(["table", "/nonexistent/runs.csv"]) == 2


def test_cli_mixed_axis_exit_code(tmp_path, capsys):
    path = tmp_path / "runs.csv"
    write_csv(fake_rows([4, 8]), path)
    assert main(["table", str(path), "--group-by", "protocol"]) == 2
    assert "'p'" in capsys.readouterr().err


def test_cli_replay(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["replay", str(TRACES / "nfais_discard.yaml"), "--out", str(out)]) == 0
    result = json.loads(out.read_text())
    flags = [d["flag"] for d in result["decisions"]]
    assert False in flags and result["stopped"]


def test_cli_estimate(tmp_path, capsys):
    cfg_path = tmp_path / "e.yaml"
    cfg_path.write_text(SMALL.replace("pfait", "nfais") + "estimate: {runs: 3}\n")
    assert main(["estimate-c", str(cfg_path), "--out", str(tmp_path / "c.json")]) == 0
    est = json.loads((tmp_path / "c.json").read_text())
    assert est[0]["runs"] == 3 and np.isfinite(est[0]["c_est"])
    assert "c_est=" in capsys.readouterr().out


@pytest.mark.parametrize("path", sorted((TRACES.parent / "configs").glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = ExperimentConfig.load(path)
    assert cfg.points() and cfg.seeds
