import csv
import json

import pytest

from mecavoid import cli
from mecavoid.oracles import CheckResult


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_run_writes_files(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", "paper_centralized", "--seed", "1", "--duration", "30",
                     "--out", str(out), "--trace"]) == 0
    for name in ("report.json", "collisions.csv", "load.csv", "alerts.csv", "trace.jsonl", "trajectories.csv"):
        assert (out / name).is_file()
    assert header(out / "collisions.csv")[:4] == ["pair_a", "pair_b", "kinds", "outcome"]
    assert header(out / "load.csv") == ["t", "msgs_per_s"]
    assert header(out / "alerts.csv") == cli.ALERTS_HEADER
    assert header(out / "trajectories.csv") == cli.TRAJECTORY_HEADER
    assert len(read_csv(out / "load.csv")) == 30
    assert "seed=1" in capsys.readouterr().out


def test_report_is_rerunnable(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    cli.main(["run", "--config", "paper_centralized", "--seed", "5", "--duration", "20", "--out", str(first)])
    cli.main(["run", "--config", str(first / "report.json"), "--out", str(second)])
    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()


def test_overrides_reach_the_report(tmp_path):
    out = tmp_path / "d"
    cli.main(["run", "--config", "paper_centralized", "--mode", "distributed", "--penetration", "0.5",
              "--duration", "10", "--out", str(out)])
    scen = json.loads((out / "report.json").read_text())["config"]["scenario"]
    assert scen["mode"] == "distributed" and scen["penetration"] == 0.5


def test_missing_topology_names_the_path(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[scenario]\ntopology = nowhere/streets.topo\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "nowhere/streets.topo" in capsys.readouterr().err


def test_sweep_rows_and_summary(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["sweep", "--config", "paper_fixed_beaconing", "--axis", "beaconing=dynamic,fixed10",
                     "--runs", "2", "--duration", "15", "--jobs", "1", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 4
    assert {r["beaconing"] for r in rows} == {"dynamic", "fixed10"}
    assert len({r["seed"] for r in rows}) == 2
    summary = read_csv(out / "sweep_summary.csv")
    assert [s["runs"] for s in summary] == ["2", "2"]
    assert "detection_rate_ci95" in summary[0]


def test_empty_seed_list_is_an_error(tmp_path, capsys):
    assert cli.main(["sweep", "--config", "paper_centralized", "--seeds", "", "--out", str(tmp_path)]) == 2
    assert "seeds" in capsys.readouterr().err


def test_bad_axis_is_an_error(tmp_path):
    assert cli.main(["sweep", "--config", "paper_centralized", "--axis", "colour=red", "--out", str(tmp_path)]) == 2


def test_oracle_exit_codes(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_suite", lambda name: [CheckResult("ok", True, "fine")])
    assert cli.main(["oracle", "cubic"]) == 0
    monkeypatch.setattr(cli, "run_suite", lambda name: [CheckResult("roots", False, "off by 1e-3")])
    assert cli.main(["oracle", "cubic"]) == 1
    assert "roots" in capsys.readouterr().err


def test_oracle_examples_suite_passes():
    assert cli.main(["oracle", "examples"]) == 0


def test_mean_ci():
    assert cli.mean_ci([]) == (None, None)
    assert cli.mean_ci([2.0]) == (2.0, None)
    m, h = cli.mean_ci([1.0, 2.0, 3.0])
    assert m == 2.0 and h == pytest.approx(4.302653 * 1.0 / 3**0.5, rel=1e-6)
