from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from corrsense.cli import main
from corrsense.divergence import kl_normalized


def rows_of(text: str) -> list[dict]:
    lines = text.splitlines()
    assert lines[0] == "# schema_version=1"
    return list(csv.DictReader(lines[1:]))


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


ST_SMALL = dict(procedure="st_intervals", model="normalized", n=512, k=8, rho=0.3, m=8,
                trials=100, seed=3)


def test_kl_single_row(capsys):
    assert main(["kl", "--model", "normalized", "--rho", "0.3", "--k", "4"]) == 0
    rows = rows_of(capsys.readouterr().out)
    assert len(rows) == 1
    assert float(rows[0]["kl"]) == pytest.approx(0.19192956477208373, abs=1e-12)


def test_kl_grid_and_zero(capsys):
    assert main(["kl", "--rho", "0", "0.2", "--k", "8", "9"]) == 0
    rows = rows_of(capsys.readouterr().out)
    assert len(rows) == 4
    assert float(rows[0]["kl"]) == 0.0
    assert float(rows[3]["kl"]) == pytest.approx(kl_normalized(0.2, 9))


def test_kl_domain_error(capsys):
    assert main(["kl", "--rho", "1.2"]) == 2
    assert "rho=1.2" in capsys.readouterr().err


def test_short_flags_rejected():
    assert main(["kl", "--rh", "0.2"]) == 2


def test_bounds(capsys):
    assert main(["bounds", "--class", "k_sets", "--n", "100", "--k", "10", "--rho", "0.2",
                 "--m", "0"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["adaptive_lower_bound"]["value"] == 0.25
    assert rep["schema_version"] == 1
    assert main(["bounds", "--class", "k_sets", "--n", "100", "--k", "10", "--rho", "0.2",
                 "--budget", "500"]) == 0
    assert json.loads(capsys.readouterr().out)["class_complexity"]["value"] == 50
    assert main(["bounds", "--class", "k_intervals", "--n", "50", "--k", "5", "--rho", "0",
                 "--m", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["nonadaptive_lower_bound"]["value"] == 0.5
    assert main(["bounds", "--class", "k_sets", "--n", "10", "--k", "20", "--rho", "0.1"]) == 2


def test_calibrate(capsys, tmp_path):
    out = tmp_path / "cal.json"
    assert main(["calibrate", "--class", "disjoint_k_intervals", "--n", "256", "--k", "16",
                 "--m", "8", "--rho", "0.2", "--model", "unnormalized", "--out", str(out)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep == json.loads(out.read_text())
    assert rep["scan_threshold_monte_carlo"] < rep["scan_threshold_analytic"]
    assert set(rep["st_gamma"]) == {"st_intervals", "modified_st_intervals", "variance_thresholding"}


def test_simulate_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", **ST_SMALL)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--traces", str(tmp_path / "t")]) == 0
    summary = rows_of((tmp_path / "o" / "summary.csv").read_text())
    assert len(summary) == 1 and summary[0]["procedure"] == "st_intervals"
    trials = [json.loads(x) for x in (tmp_path / "o" / "trials.jsonl").read_text().splitlines()]
    assert len(trials) == 200
    assert all(t["schema_version"] == 1 and t["coordinate_cost"] <= 8 * 512 for t in trials)
    traces = sorted((tmp_path / "t").iterdir())
    assert len(traces) == 200
    capsys.readouterr()
    assert main(["replay", "--trace", str(traces[0]), "--budget", str(8 * 512)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["within_budget"] and rep["cost"] <= 8 * 512


def test_simulate_determinism_across_workers(tmp_path):
    outs = []
    for workers in (1, 4):
        cfg = write_config(tmp_path / f"c{workers}.json", **ST_SMALL, workers=workers)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / f"o{workers}")]) == 0
        outs.append(((tmp_path / f"o{workers}" / "summary.csv").read_bytes(),
                     (tmp_path / f"o{workers}" / "trials.jsonl").read_bytes()))
    assert outs[0] == outs[1]


def test_simulate_strong_regime(tmp_path):
    cfg = write_config(tmp_path / "c.json", procedure="st_intervals", model="normalized", n=4096,
                       k=64, rho=1 / 64, m=128, trials=400, seed=11)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    row = rows_of((tmp_path / "o" / "summary.csv").read_text())[0]
    assert float(row["risk"]) <= 0.15


def test_simulate_mismatch_fails_before_trials(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", procedure="variance_thresholding", model="normalized",
                       n=64, k=8, rho=0.3, m=4, trials=100, seed=1)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "unnormalized" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_config_validation(tmp_path):
    bad = dict(ST_SMALL, colour="blue")
    assert main(["simulate", "--config", write_config(tmp_path / "a.json", **bad),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--config", write_config(tmp_path / "b.json", **dict(ST_SMALL, rho=1.0)),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--config", write_config(tmp_path / "c.json", **dict(ST_SMALL, rho=[0.1, 0.2])),
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "d.json").write_text("{not json")
    assert main(["simulate", "--config", str(tmp_path / "d.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o")]) == 2


def test_sweep_rows_and_resume(tmp_path):
    cfg = write_config(tmp_path / "s.json", **dict(ST_SMALL, rho=[0.1, 0.3, 0.5]))
    full = tmp_path / "full.csv"
    assert main(["sweep", "--config", cfg, "--out", str(full)]) == 0
    rows = rows_of(full.read_text())
    assert [float(r["rho"]) for r in rows] == [0.1, 0.3, 0.5]
    assert all(r["error"] == "" for r in rows)
    # interrupt after the first data row, then resume
    part = tmp_path / "part.csv"
    part.write_text("\n".join(full.read_text().splitlines()[:3]) + "\n")
    assert main(["sweep", "--config", cfg, "--out", str(part)]) == 0
    assert part.read_bytes() == full.read_bytes()


def test_sweep_two_point_grid(tmp_path):
    cfg = write_config(tmp_path / "s.json", **dict(ST_SMALL, rho=[0.2, 0.4]))
    out = tmp_path / "o.csv"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    assert len(rows_of(out.read_text())) == 2


def test_sweep_partial_failure(tmp_path):
    cfg = write_config(tmp_path / "s.json", procedure="randomized_ksets", model="normalized",
                       n=64, k=[8, 2], rho=0.3, m=4, p=3, trials=100, seed=1, n_sims=1000)
    out = tmp_path / "o.csv"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 1
    rows = rows_of(out.read_text())
    assert rows[0]["error"] == "" and "2 <= p <= k" in rows[1]["error"]


def test_optimal_p(capsys):
    assert main(["optimal-p", "--k", "100", "--m", "100", "--rho", "0.005", "0.1"]) == 0
    rows = rows_of(capsys.readouterr().out)
    assert rows[0]["p_opt"] == "100"
    assert rows[1]["ceil_inv_rho"] == "10"
    assert main(["optimal-p", "--k", "100", "--m", "10", "--rho", "0"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "corrsense", "kl", "--rho", "0.1", "--k", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("# schema_version=1")
    res = subprocess.run([sys.executable, "-m", "corrsense", "kl", "--rho", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 2
