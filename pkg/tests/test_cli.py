import json
import subprocess
import sys

import pytest

from condemp.cli import main


def run(capsys, *argv):
    rc = main(list(argv))
    return rc, capsys.readouterr()


def test_eigen(capsys, tmp_path):
    rc, out = run(capsys, "eigen", "--M", "32", "--show", "3", "--json", str(tmp_path / "e.json"))
    data = json.loads(out.out)
    assert rc == 0 and len(data["eigenvalues"]) == 3
    assert data["limit_constant"]["value"] == pytest.approx(2.77e-3, rel=0.01)
    assert (tmp_path / "e.json").exists()


def test_eigen_box(capsys):
    rc, out = run(capsys, "eigen", "--box", "1,2", "--M", "16", "--show", "2")
    assert rc == 0 and json.loads(out.out)["lambda0"] == pytest.approx(1.25 * 9.8696, rel=1e-4)


def test_simulate_and_dump(capsys, tmp_path):
    rc, out = run(capsys, "simulate", "--process", "killed", "--T", "0.05", "--N", "5", "--x0", "0.5",
                  "--dump-paths", str(tmp_path))
    assert rc == 0 and json.loads(out.out)["N"] == 5
    assert len(list(tmp_path.glob("path_*.csv"))) == 5
    rc, out = run(capsys, "simulate", "--T", "0.1", "--N", "4")
    assert rc == 0 and "ess" in json.loads(out.out)


def test_converge_writes_outputs(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"M": 32, "N": 4, "t_list": [1.0], "T_list": [2.0]}))
    rc, out = run(capsys, "converge", "--config", str(cfg), "--seed", "3", "--output", str(tmp_path / "o"))
    assert rc == 0 and "t*mean(W2^2)" in out.out
    assert (tmp_path / "o" / "aggregates.csv").exists()
    meta = json.loads((tmp_path / "o" / "metadata.json").read_text())
    assert meta["config"]["T_list"] == [2.0] and meta["config"]["seed"] == 3


def test_invalid_config_exit_code(capsys, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"t_list": [5.0], "T_list": [1.0]}))
    rc, out = run(capsys, "converge", "--config", str(cfg))
    assert rc == 2 and "T_list[0]" in out.err


def test_rates_rejects_one_dimension(capsys):
    rc, out = run(capsys, "rates", "--M", "16", "--N", "2", "--t", "1", "2", "4")
    assert rc == 2 and "d >= 2" in out.err


def test_bismut_check(capsys):
    rc, out = run(capsys, "bismut-check", "--N", "3000", "--x", "0.3", "--t", "0.1")
    data = json.loads(out.out)
    assert data["exact"] == pytest.approx(-0.263174, rel=1e-5)
    assert rc == (0 if data["within_3se"] else 1)


def test_ot_selftest(capsys):
    rc, out = run(capsys, "ot-selftest", "--instances", "20", "--sinkhorn-instances", "1")
    assert rc == 0 and json.loads(out.out)["ok"]


def test_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "condemp.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "converge" in out.stdout
