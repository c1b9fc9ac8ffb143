"""
Goal: Spec files parse into the models, errors carry line numbers, and the CSV
interchange keeps trajectories intact.
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cphlab.adapters.spec_file import (
    load_calibration_spec,
    load_experiment,
    load_run_config,
    load_site_polynomials,
    dynamics_hash,
    spec_hash,
)
from cphlab.adapters.trajectory_csv import (
    read_events,
    read_trajectory,
    trajectory_path,
    write_dataset,
    write_events,
    write_trajectory,
)
from cphlab.models.errors import SpecError
from cphlab.services.bias import CalibrationPolynomial
from cphlab.services.dbo import ControllerEvent
from cphlab.services.dynamics import LambdaTrajectory
from cphlab.services.titration import DATASET_COLUMNS, TitrationDataset

SPECS = Path(__file__).resolve().parents[1] / "docs" / "specs"

SPEC = """\
name = "pair"
n_steps = 5000
seed = 7
ph_values = [3.5, 4.0, 4.5]

[[sites]]
id = "GLU"
pka = 4.25

[[sites]]
id = "HIS"
pka = 6.3816
pka_delta = 6.53
pka_eps = 6.92

[[couplings]]
a = "GLU"
b = "HIS"
j = 4.0

[run]
dt = 0.002
output_stride = 50
"""


def test_experiment_spec_loads(tmp_path):
    p = tmp_path / "pair.toml"
    p.write_text(SPEC)
    spec = load_experiment(p)
    assert spec.site_ids == ("GLU", "HIS")
    assert spec.run.n_steps == 5000 and spec.run.seed == 7
    assert spec.run.output_stride == 50
    assert spec.sites[1].has_tautomers
    assert spec.couplings[0].j == 4.0


def test_spec_hash_ignores_formatting(tmp_path):
    a = tmp_path / "a.toml"
    b = tmp_path / "b.toml"
    a.write_text(SPEC)
    b.write_text("# same spec\n" + SPEC.replace("pka = 4.25", "pka    =    4.25"))
    assert spec_hash(load_experiment(a)) == spec_hash(load_experiment(b))
    c = tmp_path / "c.toml"
    c.write_text(SPEC.replace("pka = 4.25", "pka = 4.3"))
    assert spec_hash(load_experiment(c)) != spec_hash(load_experiment(a))


def test_malformed_toml_names_the_line(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text('name = "x"\nsites = [\n  { id = "A" pka = 4.0 },\n]\n')
    with pytest.raises(SpecError) as exc:
        load_experiment(p)
    assert exc.value.line == 3
    assert "line 3" in exc.value.message


def test_validation_error_points_at_key(tmp_path):
    p = tmp_path / "neg.toml"
    p.write_text(SPEC.replace("dt = 0.002", "dt = -1.0"))
    with pytest.raises(SpecError) as exc:
        load_experiment(p)
    assert "run.dt" in exc.value.message
    assert exc.value.line == SPEC.splitlines().index("dt = 0.002") + 1


def test_unknown_key_is_rejected(tmp_path):
    p = tmp_path / "extra.toml"
    p.write_text(SPEC + "\nbogus = 1\n")
    with pytest.raises(SpecError):
        load_experiment(p)


def test_missing_file_is_not_swallowed(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_experiment(tmp_path / "nope.toml")


def test_run_config_and_calibration_spec(tmp_path):
    rc = tmp_path / "run.toml"
    rc.write_text("dt = 0.001\nn_steps = 10\nthermostat_tau = inf\n")
    cfg = load_run_config(rc)
    assert cfg.dt == 0.001 and cfg.thermostat_tau == float("inf")
    cal = tmp_path / "cal.toml"
    cal.write_text("reference = [[0.0, 1.0], [2.0, 0.0]]\nsigma = 0.5\ndegree = 1\n")
    assert load_calibration_spec(cal).degree == 1


def test_site_polynomials_resolve_relative_to_spec(tmp_path):
    poly = CalibrationPolynomial.zeros(2, 2)
    (tmp_path / "vmm.json").write_text(poly.model_dump_json())
    p = tmp_path / "s.toml"
    p.write_text('[[sites]]\nid = "A"\npka = 4.0\nvmm = "vmm.json"\n')
    spec = load_experiment(p)
    assert load_site_polynomials(spec, tmp_path) == {"A": poly}


def test_trajectory_csv_keeps_frames(tmp_path):
    n = 5
    traj = LambdaTrajectory(
        site_ids=("A", "B"),
        pH=4.0,
        replica=2,
        dt=0.002,
        steps=np.arange(n) * 250,
        lambda_p=np.linspace(-0.1, 1.1, 2 * n).reshape(n, 2),
        lambda_t=np.zeros((n, 2)),
        censored=np.array([[False, True]] * n),
        features=np.arange(3 * n, dtype=float).reshape(n, 3),
        total_charge=np.full(n, -1.668),
    )
    path = trajectory_path(tmp_path, 4.0, 2)
    assert path.name == "replica_002.csv" and path.parent.name == "ph_4.00"
    write_trajectory(traj, path)
    back = read_trajectory(path, 4.0, 2, 0.002)
    assert back.site_ids == ("A", "B")
    assert np.array_equal(back.steps, traj.steps)
    assert np.allclose(back.lambda_p, traj.lambda_p, atol=1e-11)
    assert np.array_equal(back.censored, traj.censored)
    assert back.features is not None and np.array_equal(back.features, traj.features)
    assert back.total_charge is not None and np.allclose(back.total_charge, -1.668)
    assert back.charge_drift == 0.0
    assert not list(tmp_path.rglob("*.tmp"))


def test_events_and_dataset_files(tmp_path):
    ev = [ControllerEvent(40.0, "A", "well", "well0", 0.0, -0.025)]
    write_events(ev, tmp_path / "e.csv")
    assert read_events(tmp_path / "e.csv") == ev
    assert read_events(tmp_path / "missing.csv") == []
    ds = TitrationDataset.from_rows(
        [
            {"site": "A", "pH": 4.0, "replica": 0, "n_frames": 10, "n_deprot": 5, "n_censored": 0, "n_prot": 5,
             "n_deprot_t0": 5, "n_deprot_t1": 0, "n_transitions": 1, "n_in_transition": 0, "duration_ps": 5.0,
             "fraction": 0.5}
        ]
    )
    write_dataset(ds, tmp_path / "dataset.csv")
    back = pd.read_csv(tmp_path / "dataset.csv")
    assert list(back.columns) == DATASET_COLUMNS
    pd.testing.assert_frame_equal(back, ds.table.reset_index(drop=True), check_dtype=False)


@pytest.mark.parametrize("name", ["glu.toml", "pair.toml", "his.toml"])
def test_shipped_experiment_specs_load(name):
    spec = load_experiment(SPECS / name)
    assert spec.sites


def test_shipped_calibration_spec_loads():
    assert load_calibration_spec(SPECS / "calibration.toml").replicas == 3


def test_dynamics_hash_ignores_grid_and_replicas(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(SPEC)
    spec = load_experiment(p)
    wider = spec.model_copy(update={"ph_values": [3.0, 3.5, 4.0, 4.5], "replicas": spec.replicas + 2, "name": "other"})
    assert dynamics_hash(wider) == dynamics_hash(spec)
    assert dynamics_hash(spec.model_copy(update={"dbo": not spec.dbo})) != dynamics_hash(spec)
    assert dynamics_hash(spec.model_copy(update={"run": spec.run.model_copy(update={"seed": 99})})) != dynamics_hash(spec)
