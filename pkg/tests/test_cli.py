import csv
import json
import subprocess
import sys

import pytest

from harrisflow import cli


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize(
    "argv, expected",
    [
        (["--b", "exp_power", "--c", "1", "--alpha", "0.5"], "nonclassical"),
        (["--b", "indicator"], "nonclassical"),
        (["--b", "exp_power", "--alpha", "1"], "classical"),
    ],
)
def test_classify(capsys, argv, expected):
    code, out, _ = run_cli(capsys, "classify", *argv)
    assert code == 0
    d = json.loads(out)
    assert d["classification"] == expected
    assert d["version"]


@pytest.mark.parametrize("F", ["[0.5,0.2]", "0.5,0.2", "0,0.5;0.4,0.9"])
def test_bad_intervals_exit_2(capsys, F):
    code, _, err = run_cli(capsys, "spectral-avoid", "--F", F)
    assert code == 2
    assert "F:" in err


def test_config_file_line_precise(capsys, tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("# comment\nb.kind = indicator\n\nbogus_key = 1\n")
    code, _, err = run_cli(capsys, "classify", "--config", str(p))
    assert code == 2
    assert f"{p}:4" in err and "bogus_key" in err
    p.write_text("n = 1.5\n")
    code, _, err = run_cli(capsys, "classify", "--config", str(p))
    assert code == 2 and f"{p}:1" in err


def test_config_file_and_override(capsys, tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("b.kind = exp_power\nb.alpha = 1.0\nmaster_seed = 5\n")
    code, out, _ = run_cli(capsys, "classify", "--config", str(p))
    assert json.loads(out)["classification"] == "classical"
    code, out, _ = run_cli(capsys, "classify", "--config", str(p), "--alpha", "0.25")
    assert json.loads(out)["classification"] == "nonclassical"


def test_show_config_lists_defaults(capsys):
    code, out, _ = run_cli(capsys, "genfun", "--show-config")
    assert code == 0
    keys = {line.split(" = ")[0] for line in out.splitlines()}
    assert {"b", "alpha", "F", "n", "seed", "dt", "dt_w", "rho", "lambda_window", "out"} <= keys


@pytest.mark.parametrize("argv", [["--n", "0"], ["--dt", "-1"], ["--rho", "0.5,1.2"], ["--b", "tabulated"]])
def test_invalid_values_exit_2(capsys, argv):
    code, _, _ = run_cli(capsys, "genfun", *argv)
    assert code == 2


def test_numerical_failure_exit_3(capsys):
    code, _, err = run_cli(capsys, "genfun", "--b", "indicator", "--n", "50", "--rho", "0.5,0.5000001,0.5000002,0.5000003,0.5000004",
                           "--max-order", "3")
    assert code == 3
    assert "condition" in err


def test_simulate_flow_outputs(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "simulate-flow", "--points", "0,0.01,0.5", "--T", "0.5", "--out", str(tmp_path))
    assert code == 0
    rows = list(csv.reader((tmp_path / "trajectories.csv").open()))
    assert rows[0] == ["# version", cli.__version__]
    assert rows[1] == ["t", "x1", "x2", "x3"]
    assert len(rows) == 2 + 501
    m = list(csv.reader((tmp_path / "merges.csv").open()))
    assert m[1] == ["time", "i", "j"]
    assert json.loads((tmp_path / "summary.json").read_text())["experiment"] == "simulate-flow"


def test_duality_csv(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "duality-check", "--b", "indicator", "--t", "0.5", "--x", "0.3", "--y", "0.7",
                           "--out", str(tmp_path))
    assert code == 0
    rows = list(csv.reader((tmp_path / "duality.csv").open()))
    assert rows[1] == ["t", "x", "y", "residual_plus0", "residual_minus_hatplus"]
    assert json.loads(out)["max_residual"] <= 1e-3


def test_resolvent_csv(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "resolvent-exponent", "--b", "indicator", "--n-lambda", "5", "--out", str(tmp_path))
    rows = list(csv.reader((tmp_path / "resolvent.csv").open()))
    assert rows[1] == ["lambda", "g", "psi"] and len(rows) == 7
    assert json.loads(out)["exponent"] == pytest.approx(0.5, abs=0.01)


def test_estimates_carry_metadata(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "spectral-avoid", "--b", "indicator", "--F", "0.25,0.5", "--n", "500", "--seed", "3")
    assert code == 0
    d = json.loads(out)
    assert len(d["estimates"]) == 3
    for e in d["estimates"]:
        assert set(e) == {"method", "value", "stderr", "n", "seed"}


def test_genfun_csv_and_reproducible(capsys, tmp_path):
    argv = ["genfun", "--b", "indicator", "--n", "300", "--rho", "0,0.3,0.5,0.7,0.9", "--max-order", "2"]
    code, out1, _ = run_cli(capsys, *argv, "--out", str(tmp_path))
    code, out2, _ = run_cli(capsys, *argv)
    a, b = json.loads(out1), json.loads(out2)
    assert a["estimates"] == b["estimates"] and a["config_hash"] == b["config_hash"]
    rows = list(csv.reader((tmp_path / "genfun.csv").open()))
    assert rows[1] == ["rho", "G", "stderr"] and len(rows) == 7
    assert "fit" in a


def test_entry_point_module():
    r = subprocess.run([sys.executable, "-m", "harrisflow.cli", "classify", "--b", "indicator"],
                       capture_output=True, text=True, check=True)
    assert json.loads(r.stdout)["classification"] == "nonclassical"


def test_seed_stream_reexported():
    assert cli.seed_stream(1, 2) == cli.seed_stream(1, 2)
