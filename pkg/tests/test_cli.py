import json
import subprocess
import sys
from pathlib import Path

import pytest

from apu_fdi.cli import main

ROOT = Path(__file__).resolve().parents[1]


def test_case_command_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["case", "--config", str(ROOT / "cases" / "case1.json"), "--seed", "42",
                 "--out", str(out), "--runs-per-class", "1", "--estimators", "pes,pens"])
    assert code == 0
    assert (out / "metrics.json").exists() and (out / "tables.txt").exists()
    assert sorted(p.name for p in out.glob("confusion_*.csv")) == sorted(
        f"confusion_{p}_{k}.csv" for p in ("e_c", "f_c", "e_t", "f_t") for k in ("pes", "pens"))
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc["rmse"]) == {"pes", "pens"}
    assert "Estimation accuracy" in capsys.readouterr().out


def test_report_reproduces_metrics(tmp_path):
    out = tmp_path / "out"
    assert main(["case", "--config", "case2", "--out", str(out), "--runs-per-class", "1",
                 "--retain-traces"]) == 0
    assert len(list((out / "traces").glob("run_*.csv"))) == 4
    before = (out / "metrics.json").read_bytes()
    assert main(["report", "--out", str(out), "--write", str(tmp_path / "again.json")]) == 0
    assert (tmp_path / "again.json").read_bytes() == before


def test_simulate_dumps_trace(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", "case1", "--out", str(out), "--health-class", "severe",
                 "--run-index", "3"]) == 0
    header = (out / "trace.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["step", "truth_N", "truth_e_c"]
    assert "pes_mean_f_t" in header and "mpes_var_N" in header and "pens_var_e_t" in header
    info = json.loads((out / "run.json").read_text())
    assert info["health_class"] == "Severe Fault"


def test_validate_model(capsys):
    assert main(["validate-model", str(ROOT / "models" / "apu_gasgen.json")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("OK")
    report = json.loads(out.split("\n", 1)[1])
    assert report["F_nonzero"] == [True]
    assert report["G_columns_nonzero"] == [True] * 4


def test_validate_model_flags_structure(tmp_path, capsys):
    data = json.loads((ROOT / "models" / "apu_gasgen.json").read_text())
    data["F"] = [[0.0]]
    p = tmp_path / "m.json"
    p.write_text(json.dumps(data))
    assert main(["validate-model", str(p)]) == 2
    assert "INVALID" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["case", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "missing.json" in err["message"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"process_noise_pct": 0}))
    assert main(["case", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_run_budget_exit_code(tmp_path, capsys):
    cfg = json.loads((ROOT / "cases" / "case1.json").read_text())
    cfg["divergence_factor"] = 1e-4
    cfg["model"] = str(ROOT / "models" / "apu_gasgen.json")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert main(["case", "--config", str(p), "--out", str(tmp_path / "o"), "--runs-per-class", "1"]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "run_budget_exceeded"


def test_bad_seed_rejected_by_parser():
    with pytest.raises(SystemExit):
        main(["case", "--seed", "-3"])


def test_theorems_command(tmp_path):
    out = tmp_path / "thm"
    assert main(["theorems", "--config", "case1", "--out", str(out), "--random-models", "3",
                 "--mc-runs", "0"]) == 0
    rep = json.loads((out / "theorem_report.json").read_text())
    assert rep["pass"] is True
    assert rep["theorem2"]["monotone"] is True


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "apu_fdi.cli", "validate-model",
                        str(ROOT / "models" / "apu_gasgen.json")], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("OK")
