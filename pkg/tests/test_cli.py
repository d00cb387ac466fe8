import json
import os

import pytest

from hmglab import cli
from hmglab.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, EXIT_SOLVER, main
from hmglab.store import ResultStore

SMALL = """schema = 1
model = crowding
Lambda = 2.0
n_max = 2
h = 0.5
levels = 2
mode = interior
check_sides = 1.0
mc_samples = 200
"""


def write_cfg(tmp_path, extra="", name="run.cfg"):
    path = tmp_path / name
    path.write_text(SMALL + extra + f"out = {tmp_path / 'out'}\n")
    return str(path)


def test_compute_writes_records_and_skips_cached(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["compute", "--config", cfg, "--p", "1.0", "--q", "1.5"]) == EXIT_OK
    store = ResultStore(tmp_path / "out")
    recs = list(store.records())
    assert [r["type"] for r in recs] == ["nu", "nu_star", "J"]
    assert recs[2]["result"]["value"] >= -1e-9
    capsys.readouterr()
    assert main(["compute", "--config", cfg, "--p", "1.0", "--q", "1.5"]) == EXIT_OK
    assert "skipped (cached)" in capsys.readouterr().out
    assert len(list(store.records())) == 3
    assert main(["compute", "--config", cfg, "--p", "1.0", "--q", "1.5", "--force"]) == EXIT_OK
    assert len(list(store.records())) == 6
    assert [r["status"] for r in store.manifest()["runs"]] == ["ok", "ok"]


def test_compute_multiple_cubes_with_workers(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    monkeypatch.setenv("HMGLAB_WORKERS", "2")
    assert main(["compute", "--config", cfg, "--level", "0", "--level", "1"]) == EXIT_OK
    par = [r["result"]["value"] for r in ResultStore(tmp_path / "out").records()]
    monkeypatch.setenv("HMGLAB_WORKERS", "1")
    assert main(["compute", "--config", cfg, "--level", "0", "--level", "1", "--out", str(tmp_path / "seq")]) == EXIT_OK
    seq = [r["result"]["value"] for r in ResultStore(tmp_path / "seq").records()]
    assert par == seq and len(par) == 2


def test_bad_workers_environment(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    monkeypatch.setenv("HMGLAB_WORKERS", "many")
    assert main(["compute", "--config", cfg, "--level", "0", "--level", "1"]) == EXIT_CONFIG


@pytest.mark.parametrize(
    "argv_extra,cfg_extra",
    [
        (["--p", "1,2"], ""),
        (["--p", "x"], ""),
        ([], "speed = 1\n"),
        (["--workers", "0"], ""),
    ],
)
def test_config_errors_exit_2(tmp_path, capsys, argv_extra, cfg_extra):
    cfg = write_cfg(tmp_path, cfg_extra)
    assert main(["compute", "--config", cfg] + argv_extra) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_missing_config_file_and_grid_budget(tmp_path):
    assert main(["compute", "--config", str(tmp_path / "nope.cfg")]) == EXIT_CONFIG
    cfg = write_cfg(tmp_path, "memory_budget = 10\n")
    assert main(["compute", "--config", cfg, "--level", "2"]) == EXIT_CONFIG


def test_solver_failure_exits_3(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "max_iter = 1\n")
    assert main(["compute", "--config", cfg, "--level", "1"]) == EXIT_SOLVER
    assert "solver" in capsys.readouterr().err
    assert main(["cascade", "--config", cfg, "--out", str(tmp_path / "c")]) == EXIT_SOLVER
    assert ResultStore(tmp_path / "c").manifest()["runs"][-1]["status"] == "failed"


def test_invariant_failure_exits_4(tmp_path):
    # an identity tolerance below rounding error cannot be met
    cfg = write_cfg(tmp_path, "identity_tol = 1e-300\n")
    assert main(["check", "identities", "--config", cfg]) == EXIT_INVARIANT
    report = json.loads((tmp_path / "out" / "check_identities.json").read_text())
    assert not report["passed"] and report["first_failure"]


def test_check_identities_pass(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["check", "identities", "--config", cfg]) == EXIT_OK
    report = json.loads((tmp_path / "out" / "check_identities.json").read_text())
    assert report["passed"]


def test_cascade_and_report(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert main(["cascade", "--config", cfg]) == EXIT_OK
    header = (out / "cascade.csv").read_text().splitlines()[0].split(",")
    assert header == cli.cascade_columns(1)
    assert len((out / "cascade.csv").read_text().splitlines()) == 4
    assert main(["report", "--out", str(out), "--no-figures"]) == EXIT_OK
    rep = out / "report"
    for name in ("gap_vs_m", "tau_vs_m", "V_vs_n", "rate_line"):
        assert (rep / f"{name}.csv").exists()
        assert not (rep / f"{name}.png").exists()
    summary = (rep / "summary.txt").read_text()
    assert "alpha = " in summary and "gap bound holds at every level" in summary
    assert main(["report", "--out", str(out)]) == EXIT_OK
    for name in ("gap_vs_m", "tau_vs_m", "V_vs_n", "rate_line"):
        assert (rep / f"{name}.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_merge_and_empty_store(tmp_path):
    assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_CONFIG
    cfg = write_cfg(tmp_path)
    assert main(["compute", "--config", cfg]) == EXIT_OK
    assert main(["compute", "--config", cfg, "--out", str(tmp_path / "other"), "--level", "1"]) == EXIT_OK
    assert main(["report", "--out", str(tmp_path / "out"), "--merge", str(tmp_path / "other"), "--merge", str(tmp_path / "out"), "--no-figures"]) == EXIT_OK
    merged = (tmp_path / "out" / "report" / "merged_records.jsonl").read_text().splitlines()
    assert len(merged) == 2
    assert "no cascade" in (tmp_path / "out" / "report" / "summary.txt").read_text()


def test_seed_override_changes_hash(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["compute", "--config", cfg]) == EXIT_OK
    assert main(["compute", "--config", cfg, "--seed", "7"]) == EXIT_OK
    hashes = {r["config_hash"] for r in ResultStore(tmp_path / "out").records()}
    assert len(hashes) == 2
