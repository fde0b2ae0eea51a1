import json
import subprocess
import sys

import pytest
import yaml

from aspest.cli import main
from test_harness import TINY


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_run_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({**TINY, "seeds": [0]}))
    code, out, _ = run_cli(capsys, "run", str(cfg), "--out-dir", str(tmp_path / "o"),
                           "--seeds", "3,4", "--deterministic")
    assert code == 0
    res = json.loads(out)
    assert res["status"] == "ok" and res["runs"] == 4
    assert (tmp_path / "o" / "curve_4_20.csv").exists()
    record = json.loads((tmp_path / "o" / "results.json").read_text())
    assert record["config"]["seeds"] == [3, 4] and record["config"]["threads"] == 1


def test_sweep(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({**TINY, "seeds": [0], "budgets": [0]}))
    code, out, _ = run_cli(capsys, "sweep", str(cfg), "--out-dir", str(tmp_path / "s"),
                           "--methods", "sr,aspest")
    assert code == 0
    assert json.loads(out)["experiments"] == ["sr_margin", "aspest_margin"]
    assert (tmp_path / "s" / "summary.csv").exists()
    assert (tmp_path / "s" / "aspest_margin" / "results.json").exists()


def test_gen_data(tmp_path, capsys):
    spec = tmp_path / "d.yaml"
    spec.write_text(yaml.safe_dump({"kind": "synthetic", "n_source": 100, "n_target": 40}))
    code, out, _ = run_cli(capsys, "gen-data", str(spec), "--out-dir", str(tmp_path / "g"))
    assert code == 0
    assert json.loads(out)["sizes"] == {"train": 80, "val": 20, "test": 40}
    for name in ("train.csv", "val.csv", "test.csv", "manifest.json"):
        assert (tmp_path / "g" / name).exists()


def test_metrics_command(tmp_path, capsys):
    scores = tmp_path / "s.csv"
    scores.write_text("score,correct\n0.9,1\n0.8,0\n0.6,1\n0.4,0\n")
    code, out, _ = run_cli(capsys, "metrics", str(scores), "--out-dir", str(tmp_path / "m"))
    assert code == 0
    res = json.loads(out)
    assert res["metrics"]["auacc"] == pytest.approx(0.7291666666666666)
    assert (tmp_path / "m" / "curve.csv").exists()

    scores.write_text("score,prediction,label,selected\n0.9,a,a,1\n0.5,b,a,0\n0.7,a,a,0\n")
    code, out, _ = run_cli(capsys, "metrics", str(scores))
    res = json.loads(out)
    assert res["n_selected"] == 1 and res["metrics"]["accuracy"] == 0.5


def test_error_records(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"method": "sr", "budgets": [5]}))
    code, out, err = run_cli(capsys, "run", str(bad))
    assert code == 2 and out == ""
    rec = json.loads(err)
    assert rec["status"] == "error" and rec["error"] == "ConfigurationError"

    code, _, err = run_cli(capsys, "metrics", str(tmp_path / "missing.csv"))
    assert code == 2 and json.loads(err)["error"] == "FileNotFoundError"

    nocol = tmp_path / "x.csv"
    nocol.write_text("a,b\n1,2\n")
    code, _, err = run_cli(capsys, "metrics", str(nocol))
    assert code == 2 and "score" in json.loads(err)["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "aspest", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout
