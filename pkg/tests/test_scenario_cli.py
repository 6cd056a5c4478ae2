import csv
import json

import numpy as np
import pytest

from lagctrl.cli import EXIT_ACCEPTANCE, EXIT_OK, EXIT_VALIDATION, main, run
from lagctrl.euler import Lattice
from lagctrl.exceptions import ParameterError, ValidationError
from lagctrl.fields import LinearField
from lagctrl.geometry import read_obj
from lagctrl.scenario import Scenario, apply_override, read_lattice_csv, shipped_scenarios, write_lattice_csv

STATIC = {
    "name": "static",
    "gamma0": {"center": [0.0, 0.0, 0.0], "radius": 0.5, "mesh_level": 2},
    "gamma1": {"center": [0.0, 0.0, 0.0], "radius": 0.5, "mesh_level": 2},
    "simulation": {"rk4_steps": 20, "record_every": 10},
    "acceptance": {"final_hausdorff_max": 1e-9},
}


@pytest.fixture
def static_file(tmp_path):
    p = tmp_path / "static.json"
    p.write_text(json.dumps(STATIC))
    return p


# -- scenarios ---------------------------------------------------------------------------------

def test_shipped_scenarios_load():
    names = shipped_scenarios()
    assert "translation_zero_u0.json" in names and "translation_small_u0.json" in names
    for n in names:
        if n.startswith("mismatched"):
            continue
        s = Scenario.load(n)
        s.isotopy()


def test_mismatched_volume_rejected():
    with pytest.raises(ValidationError, match="same volume"):
        Scenario.load("mismatched_volume.json")


def test_unknown_key_rejected(static_file):
    with pytest.raises(ValidationError):
        Scenario.load(static_file, ["picard.speed=3"])


def test_override_parsing():
    d = apply_override({}, "a.b.c=[1, 2]")
    assert d == {"a": {"b": {"c": [1, 2]}}}
    assert apply_override({}, "name=abc")["name"] == "abc"
    with pytest.raises(ParameterError):
        apply_override({}, "novalue")


def test_lattice_csv_roundtrip(tmp_path):
    lat = Lattice.covering((0, 0, 0), 0.5, 0.25)
    u = LinearField(np.arange(9.0).reshape(3, 3))
    pts = lat.points()
    rng = np.random.default_rng(0)
    order = rng.permutation(len(pts))  # row order must not matter
    write_lattice_csv(tmp_path / "f.csv", pts[order], u(0.0, pts)[order])
    f = read_lattice_csv(tmp_path / "f.csv")
    assert f.lattice.shape == lat.shape
    x = rng.uniform(-0.5, 0.5, (20, 3))
    assert np.allclose(f(0.0, x), u(0.0, x), atol=1e-12)


def test_irregular_lattice_csv_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y,z,ux,uy,uz\n0,0,0,1,1,1\n0.1,0,0,1,1,1\n0.3,0,0,1,1,1\n")
    with pytest.raises(ValidationError):
        read_lattice_csv(p)


# -- command line ------------------------------------------------------------------------------

def test_validation_exit_code(tmp_path):
    code = run("simulate", "mismatched_volume.json", tmp_path / "out")
    assert code == EXIT_VALIDATION
    err = json.loads((tmp_path / "out" / "error.json").read_text())
    assert err["exit_code"] == EXIT_VALIDATION and "volume" in err["message"]
    assert (tmp_path / "out" / "timing.json").exists()


def test_bad_seed_rejected(static_file, tmp_path):
    code = main(["simulate", "--scenario", str(static_file), "--out", str(tmp_path), "--seed", "-1"])
    assert code == EXIT_VALIDATION


def test_static_simulation_deterministic(static_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", static_file, a, seed=7) == EXIT_OK
    assert run("simulate", static_file, b, seed=7) == EXIT_OK
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    summary = json.loads((a / "summary.json").read_text())
    assert summary["seed"] == 7 and summary["final_hausdorff"] <= 1e-9
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["picard"]["max_iter"] == 20  # defaults resolved
    assert read_obj(a / "final.obj").n_vertices == 162
    with open(a / "field.csv") as fh:
        assert next(csv.reader(fh)) == ["x", "y", "z", "ux", "uy", "uz"]
    with open(a / "iteration_log.csv") as fh:
        assert next(csv.reader(fh)) == ["iter", "residual", "ball_norm", "lambda_norms"]

    assert run("verify", static_file, a) == EXIT_OK
    ver = json.loads((a / "verify.json").read_text())
    assert ver["mismatches"] == []


def test_verify_detects_tampering(static_file, tmp_path):
    out = tmp_path / "run"
    assert run("simulate", static_file, out) == EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    s["final_hausdorff"] = 0.5
    (out / "summary.json").write_text(json.dumps(s))
    assert run("verify", static_file, out) == EXIT_ACCEPTANCE


def test_acceptance_miss_exit_code(static_file, tmp_path):
    code = run("simulate", static_file, tmp_path / "o", overrides=["gamma1.center=[0.05, 0, 0]",
                                                                  "isotopy.tube_radius=0.3"])
    assert code == EXIT_ACCEPTANCE
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["acceptance_failures"]


def test_sweep_writes_csv(static_file, tmp_path):
    out = tmp_path / "sw"
    code = run("sweep", static_file, out, overrides=["sweep.parameter=simulation.rk4_steps",
                                                     "sweep.values=[10, 20]"])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [float(r["simulation.rk4_steps"]) for r in rows] == [10.0, 20.0]
    assert all(float(r["final_hausdorff"]) <= 1e-9 for r in rows)
