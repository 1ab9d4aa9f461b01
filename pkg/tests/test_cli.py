import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from regimeml import cli, mcem
from regimeml.switching_model import save_model

FAST_MCEM = ["--iterations", "3", "--mh-samples", "2000", "--burn-in", "500", "--eta-thin", "100",
             "--info-burn-in", "1000", "--info-samples", "5000", "--tail", "2"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "regimeml", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()


def test_simulate_doa_outputs_and_determinism(tmp_path):
    for tag in ("a", "b"):
        assert cli.main(["simulate", "--doa", "--n", "25", "--d", "3", "--seed", "4", "--out", str(tmp_path / tag)]) == 0
    rows = _rows(tmp_path / "a" / "snapshots.csv")
    assert rows[0] == ["re0", "im0", "re1", "im1", "re2", "im2"] and len(rows) == 26
    assert _rows(tmp_path / "a" / "angles.csv")[0] == ["x"]
    for name in ("snapshots.csv", "angles.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["outputs"] == ["snapshots.csv", "angles.csv"]


def test_simulate_switching_model(tmp_path, two_state):
    save_model(two_state, tmp_path / "m.json")
    assert cli.main(["simulate", "--model", str(tmp_path / "m.json"), "--n", "30", "--seed", "1",
                     "--out", str(tmp_path / "o")]) == 0
    obs = _rows(tmp_path / "o" / "observations.csv")
    reg = _rows(tmp_path / "o" / "regimes.csv")
    assert obs[0] == ["y"] and len(obs) == 1 + 31  # one lag value plus n observations
    assert reg[0] == ["x"] and len(reg) == 1 + 30


@pytest.mark.parametrize("argv", [
    ["simulate", "--doa", "--n", "0"],
    ["simulate", "--doa", "--d", "1"],
    ["simulate"],
    ["fit-mcem", "--data", "does-not-exist.csv"],
    ["fit-mcem", "--data", "x.csv", "--mh-samples", "0"],
])
def test_usage_errors_exit_2(tmp_path, argv, capsys):
    assert cli.main(argv + ["--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_malformed_csv_reports_location(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("re0,im0,re1,im1\n1,2,3,4\n1,2,3\n")
    assert cli.main(["fit-mcem", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "row 3" in capsys.readouterr().err


def test_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 12, "d": 2, "doa": True}))
    assert cli.main(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "o")]) == 0
    assert len(_rows(tmp_path / "o" / "snapshots.csv")) == 13
    # command-line flags win over the file
    assert cli.main(["simulate", "--config", str(cfg), "--n", "5", "--out", str(tmp_path / "p")]) == 0
    assert len(_rows(tmp_path / "p" / "snapshots.csv")) == 6
    cfg.write_text(json.dumps({"n": 12, "bogus": 1}))
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 2
    cfg.write_text("[1, 2]")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 2


def test_fit_exact_report(tmp_path, two_state_hmm):
    save_model(two_state_hmm, tmp_path / "m.json")
    cli.main(["simulate", "--model", str(tmp_path / "m.json"), "--n", "300", "--seed", "2", "--out", str(tmp_path / "d")])
    assert cli.main(["fit-exact", "--data", str(tmp_path / "d" / "observations.csv"), "--model-init",
                     str(tmp_path / "m.json"), "--starts", "2", "--seed", "0", "--out", str(tmp_path / "f")]) == 0
    rep = json.loads((tmp_path / "f" / "report.json").read_text())
    assert rep["fit"]["converged"]
    p = len(rep["parameters"])
    assert np.array(rep["information"]["matrix"]).shape == (p, p)
    assert len(rep["intervals"]["unconstrained"]) == p
    for (lo, hi), est in zip(rep["intervals"]["natural"], rep["intervals"]["natural_estimate"]):
        assert lo <= est <= hi


def test_fit_mcem_outputs(tmp_path):
    cli.main(["simulate", "--doa", "--n", "30", "--seed", "3", "--out", str(tmp_path / "d")])
    data = str(tmp_path / "d" / "snapshots.csv")
    argv = ["fit-mcem", "--data", data, "--init", "0.5,0.5,0.5", "--theta-star", "0.25,0.64,0.36", "--seed", "1"]
    assert cli.main(argv + FAST_MCEM + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(argv + FAST_MCEM + ["--out", str(tmp_path / "b")]) == 0
    traj = _rows(tmp_path / "a" / "trajectory.csv")
    assert traj[0] == mcem.TRAJECTORY_COLUMNS and len(traj) == 1 + 4
    diag = (tmp_path / "a" / "diagnostics.jsonl").read_text().splitlines()
    assert len(diag) == 4 and set(json.loads(diag[1])) == set(mcem.TRAJECTORY_COLUMNS) | {"clamped"}
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert 0 <= rep["chi_square"]["p_value"] <= 1
    assert np.allclose(rep["information"]["matrix"], np.array(rep["information"]["matrix"]).T)


def test_fit_mcem_zero_iterations(tmp_path):
    cli.main(["simulate", "--doa", "--n", "10", "--seed", "3", "--out", str(tmp_path / "d")])
    assert cli.main(["fit-mcem", "--data", str(tmp_path / "d" / "snapshots.csv"), "--init", "0.3,0.3,0.3",
                     "--iterations", "0", "--out", str(tmp_path / "o")]) == 0
    traj = _rows(tmp_path / "o" / "trajectory.csv")
    assert len(traj) == 2 and [float(v) for v in traj[1][1:4]] == [0.3, 0.3, 0.3]


def test_verify_subset(tmp_path, capsys):
    assert cli.main(["verify", "--only", "chi2", "--out", str(tmp_path / "v")]) == 0
    out = capsys.readouterr().out
    assert "chi2" in out and "1/1 checks passed" in out
    rec = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert rec[0]["passed"] is True
    assert cli.main(["verify", "--only", "nope"]) == 2
    capsys.readouterr()
    assert cli.main(["verify", "--only", "corollary1"]) == 0
    assert "PASS forgetting" in capsys.readouterr().out


def test_reproduce_doa_small(tmp_path):
    argv = ["reproduce-doa", "--n", "30", "--seed", "7"] + FAST_MCEM
    assert cli.main(argv + ["--out", str(tmp_path / "a")]) == 0
    for i in range(5):
        rows = _rows(tmp_path / "a" / f"trajectory_start{i}.csv")
        assert rows[0] == mcem.TRAJECTORY_COLUMNS and len(rows) == 1 + 4
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["estimate_from_start"] == 2 and len(rep["tail_means"]) == 5
    assert rep["inits"][0] == list(cli.THETA_STAR)
    assert set(rep["intervals"]) >= {"level", "bounds", "covers_theta_star"}
    assert cli.main(argv + ["--out", str(tmp_path / "b")]) == 0
    for name in ["snapshots.csv", "report.json"] + [f"trajectory_start{i}.csv" for i in range(5)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_agreement_metric():
    t = lambda *p: mcem.McemTrajectory([mcem.DoaParams(*p)], [0.0], [0.0], [])
    assert cli.agreement_metric([t(1, 1, 1), t(1, 1, 1)]) == 0.0
    assert cli.agreement_metric([t(1, 1, 1), t(1, 1, 2), t(1, 1, 4)]) == pytest.approx(3.0)


def test_config_supplies_required_data(tmp_path):
    cli.main(["simulate", "--doa", "--n", "8", "--seed", "3", "--out", str(tmp_path / "d")])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(tmp_path / "d" / "snapshots.csv"), "iterations": 0, "init": "0.3,0.3,0.3"}))
    assert cli.main(["fit-mcem", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert cli.main(["fit-mcem", "--out", str(tmp_path / "o")]) == 2
