import json

import numpy as np
import pytest

import aslyap as al
from aslyap.cli import main

from conftest import MODELS

ROT = str(MODELS / "rotational.model")
LIN = str(MODELS / "linear1d.model")
UNSTABLE = str(MODELS / "unstable1d.model")
UNSTABLE2D = str(MODELS / "unstable2d.model")


def _runs(tmp_path):
    return str(tmp_path / "runs")


def test_check_passes_on_rotational(tmp_path):
    assert main(["check", "--model", ROT, "--grid", "41", "--out", _runs(tmp_path)]) == 0
    run = next((tmp_path / "runs").iterdir())
    report = json.loads((run / "report.json").read_text())
    assert report["all_pass"] is True
    assert (run / "report.csv").exists()
    assert (run / "manifest.json").exists()


def test_check_fails_on_unstable(tmp_path):
    assert main(["check", "--model", UNSTABLE, "--grid", "41",
                 "--out", _runs(tmp_path)]) == 1
    run = next((tmp_path / "runs").iterdir())
    report = json.loads((run / "report.json").read_text())
    assert report["n_fail"] > 0


def test_check_missing_candidate_is_config_error(tmp_path):
    bare = tmp_path / "bare.model"
    bare.write_text(
        "[dimensions]\nstate = 1\nnoise = 1\n[controls]\nhold = 0\n"
        "[dynamics]\nf1 = -x1\n[domain]\nlower = -1\nupper = 1\n"
    )
    assert main(["check", "--model", str(bare), "--out", _runs(tmp_path)]) == 2


def test_missing_model_file_is_config_error(tmp_path):
    assert main(["check", "--model", "nope.model", "--out", _runs(tmp_path)]) == 2


def test_unknown_flag_is_config_error(tmp_path):
    assert main(["check", "--model", ROT, "--bogus", "1"]) == 2


def test_value_sup_writes_field(tmp_path):
    assert main(["value", "sup", "--model", LIN, "--grid", "81",
                 "--out", _runs(tmp_path)]) == 0
    run = next((tmp_path / "runs").iterdir())
    grid = al.Grid((-1.0,), (1.0,), (81,))
    fld = al.ScalarField.from_csv((run / "field.csv").read_text(), grid)
    r = np.abs(grid.nodes()[:, 0])
    mask = r <= 0.8
    assert np.abs(fld.flat - r)[mask].max() <= 0.05
    sidecar = json.loads((run / "field.json").read_text())
    assert sidecar["converged"] is True


def test_value_discounted_rejects_bad_lambda(tmp_path):
    assert main(["value", "discounted", "--model", ROT, "--lambda", "-1",
                 "--out", _runs(tmp_path)]) == 2
    assert main(["value", "discounted", "--model", ROT, "--theta", "0",
                 "--grid", "21", "--out", _runs(tmp_path)]) == 2


def test_value_integral_needs_gauge(tmp_path):
    assert main(["value", "integral", "--model", UNSTABLE,
                 "--out", _runs(tmp_path)]) == 2


def test_value_discounted_writes_prop_set(tmp_path):
    assert main(["value", "discounted", "--model", ROT, "--grid", "31",
                 "--cap", "0.6", "--dt", "0.01", "--out", _runs(tmp_path)]) == 0
    run = next((tmp_path / "runs").iterdir())
    lines = (run / "prop_set.csv").read_text().splitlines()
    assert lines[0] == "index,in_prop_set"
    flags = np.array([int(l.split(",")[1]) for l in lines[1:]])
    assert flags.sum() > 0


def test_simulate_reproducible_runs(tmp_path):
    args = ["simulate", "--model", ROT, "--x0", "0.5,0", "--dt", "1e-3",
            "-T", "0.5", "--paths", "40", "--seed", "7", "--out", _runs(tmp_path)]
    assert main(args) == 0
    runs = sorted((tmp_path / "runs").iterdir())
    assert len(runs) == 1
    first = (runs[0] / "ensemble.csv").read_bytes()
    assert main(args) == 0  # same config hashes to the same directory
    runs = sorted((tmp_path / "runs").iterdir())
    assert len(runs) == 1
    assert (runs[0] / "ensemble.csv").read_bytes() == first
    manifest = json.loads((runs[0] / "ensemble.json").read_text())
    assert manifest["seed"] == 7 and manifest["n_paths"] == 40


def test_simulate_thin_writes_paths(tmp_path):
    assert main(["simulate", "--model", ROT, "--x0", "0.4,0", "--dt", "1e-2",
                 "-T", "0.1", "--paths", "2", "--thin", "5",
                 "--out", _runs(tmp_path)]) == 0
    run = next((tmp_path / "runs").iterdir())
    assert (run / "paths.csv").read_text().splitlines()[0] == "t,x1,x2,path"


def test_gauge_command(tmp_path):
    assert main(["gauge", "--model", ROT, "--radii", "0.2,0.4", "--paths", "60",
                 "-T", "3", "--out", _runs(tmp_path)]) == 0
    run = next((tmp_path / "runs").iterdir())
    gauges = json.loads((run / "gauges.json").read_text())
    assert gauges["stabilizability"]["consistent"] is True
    assert gauges["decay"]["kappa"] == pytest.approx(0.5, abs=0.15)


def test_viability_command(tmp_path):
    assert main(["viability", "--model", ROT, "--grid", "81", "--mu", "0.5",
                 "--out", _runs(tmp_path)]) == 0
    assert main(["viability", "--model", UNSTABLE2D, "--grid", "81", "--mu", "0.5",
                 "--out", _runs(tmp_path)]) == 1
    assert main(["viability", "--model", ROT, "--grid", "41", "--mu", "99",
                 "--out", _runs(tmp_path)]) == 2  # level outside the field range


def test_pipeline_rotational(tmp_path):
    assert main(["pipeline", "--model", ROT, "--grid", "41", "--paths", "60",
                 "-T", "4", "--sim-dt", "2e-3", "--seed", "1",
                 "--out", _runs(tmp_path)]) == 0
    run = next((tmp_path / "runs").iterdir())
    stages = json.loads((run / "pipeline.json").read_text())
    for stage in ("value", "feedback", "simulate", "gauge", "supermaxingale",
                  "re_verify"):
        assert stage in stages
    assert stages["re_verify"]["band_pass_fraction"] >= 0.99
    assert (run / "sup_value.csv").exists() and (run / "feedback.csv").exists()


def test_pipeline_fails_on_unstable(tmp_path):
    code = main(["pipeline", "--model", UNSTABLE2D, "--grid", "21", "--paths", "20",
                 "-T", "2", "--sim-dt", "2e-3", "--out", _runs(tmp_path)])
    assert code == 1


def test_pipeline_multi_cap_monotone(tmp_path):
    assert main(["pipeline", "--model", ROT, "--grid", "31", "--paths", "40",
                 "-T", "3", "--sim-dt", "2e-3", "--multi-cap",
                 "--out", _runs(tmp_path)]) == 0
    run = next((tmp_path / "runs").iterdir())
    stages = json.loads((run / "pipeline.json").read_text())
    assert stages["multi_cap"]["monotone_in_cap"] is True


def test_version_flag():
    assert main(["--version"]) == 0
