import csv
import json

import numpy as np
import pytest

from qttdmz.bench import (
    ExperimentConfig,
    compute_rmse,
    is_divergent,
    rmse_from_estimates,
    run_offline,
    run_trials,
    trial_seed,
)
from qttdmz.cli import main
from qttdmz.errors import ConfigError, StabilityError
from qttdmz.models import Trajectory

SMALL = {
    "model": {"preset": "cubic", "d": 2},
    "grid": {"levels": 4},
    "solver": {"dt": 0.01, "eps1": 1e-6, "eps2": 1e-8},
    "run": {"T": 0.1, "trials": 2, "seed": 3, "filters": ["qtt", "pf", "ekf", "prior", "truth"], "allow_unstable": True},
    "pf": {"particles": 300},
}

TOML = """
[model]
preset = "cubic"
d = 2

[grid]
levels = 4

[solver]
dt = 0.01
eps1 = 1e-6
eps2 = 1e-8

[run]
T = 0.05
trials = 2
seed = 5
filters = ["qtt", "pf", "ekf"]

[pf]
particles = 200

[export]
density_every = 2
axes = [0, 1]
"""


def small(**overrides):
    raw = json.loads(json.dumps(SMALL))
    for section, vals in overrides.items():
        raw.setdefault(section, {}).update(vals)
    return ExperimentConfig.from_dict(raw)


# --- metrics -------------------------------------------------------------------


def test_rmse_of_truth_is_zero():
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert compute_rmse(x, x) == 0.0


def test_rmse_formula():
    assert compute_rmse([[1.0], [2.0]], [[0.0], [1.0]]) == 1.0
    est = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, 1.0]])
    tru = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    # (1 + 4) + (1 + 1) + (4 + 0) = 11 over d * N_T = 6
    assert compute_rmse(est, tru) == pytest.approx(11 / 6)


def test_rmse_shape_mismatch():
    with pytest.raises(ConfigError):
        compute_rmse(np.zeros((3, 2)), np.zeros((2, 2)))


def test_divergence_rule():
    assert is_divergent([[0.0, np.nan]], 1.0)
    assert is_divergent([[11.0, 0.0]], 1.0)
    assert not is_divergent([[9.0, 0.0]], 1.0)


def test_trial_seed_xor():
    assert [trial_seed(6, i) for i in range(4)] == [6, 7, 4, 5]


# --- configuration ---------------------------------------------------------------


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="colour"):
        ExperimentConfig.from_dict({"run": {"colour": "red"}})


@pytest.mark.parametrize(
    "section,vals",
    [
        ("model", {"preset": "quintic"}),
        ("grid", {"levels": 0}),
        ("solver", {"dt": -1.0}),
        ("solver", {"eps1": 2.0}),
        ("run", {"T": 0.015}),
        ("run", {"filters": ["kalman"]}),
        ("run", {"trials": 0}),
    ],
)
def test_invalid_values_rejected(section, vals):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({section: vals})


def test_toml_loading(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(TOML)
    cfg = ExperimentConfig.load(path)
    assert cfg["pf"]["particles"] == 200 and cfg["model"]["d"] == 2
    path.write_text("[run\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(path)


# --- offline ------------------------------------------------------------------------


def test_offline_cache_hit_and_miss(tmp_path):
    cfg = small()
    first = run_offline(cfg, tmp_path, allow_unstable=True)
    again = run_offline(cfg, tmp_path, allow_unstable=True)
    assert not first.cache_hit and again.cache_hit
    assert all(np.array_equal(a, b) for a, b in zip(first.propagator.cores, again.propagator.cores))
    changed = run_offline(small(solver={"substeps": first.params.n_substeps + 1}), tmp_path, allow_unstable=True)
    assert not changed.cache_hit
    assert changed.path != first.path


def test_unstable_config_needs_override(tmp_path):
    cfg = small(grid={"levels": 2}, run={"allow_unstable": False})
    with pytest.raises(StabilityError, match="allow-unstable"):
        run_offline(cfg, tmp_path)
    assert run_offline(cfg, tmp_path, allow_unstable=True).stability["ok"] is False


# --- trials ---------------------------------------------------------------------------


def test_trials_write_reports(tmp_path):
    agg = run_trials(small(), tmp_path)
    assert agg["filters"]["truth"]["mean_rmse"] == 0.0
    for name in ("qtt", "pf", "ekf", "prior"):
        assert np.isfinite(agg["filters"][name]["mean_rmse"])
    rows = list(csv.DictReader(open(tmp_path / "trials.csv")))
    assert len(rows) == 2 * 5
    assert {r["filter"] for r in rows} == {"qtt", "pf", "ekf", "prior", "truth"}
    assert float(rows[0]["online_seconds"]) >= 0
    timing = json.loads((tmp_path / "timing.json").read_text())
    assert set(timing["filters"]) == {"qtt", "pf", "ekf", "prior", "truth"}
    tr = Trajectory.load_csv(tmp_path / "trajectory_1.csv")
    assert tr.seed == trial_seed(3, 1)


def test_rmse_recomputed_from_estimates(tmp_path):
    agg = run_trials(small(), tmp_path)
    again = rmse_from_estimates(tmp_path / "estimates_qtt.csv")
    for trial, val in again.items():
        assert val == pytest.approx(agg["filters"]["qtt"]["rmse"][trial], rel=1e-12)


def test_same_seed_gives_identical_aggregate(tmp_path):
    run_trials(small(), tmp_path / "a")
    run_trials(small(), tmp_path / "b", workers=2)
    assert (tmp_path / "a" / "aggregate.json").read_bytes() == (tmp_path / "b" / "aggregate.json").read_bytes()
    run_trials(small(), tmp_path / "c", seed=4)
    assert (tmp_path / "a" / "aggregate.json").read_bytes() != (tmp_path / "c" / "aggregate.json").read_bytes()


def test_filters_share_trajectories(tmp_path):
    agg = run_trials(small(), tmp_path)
    hashes = [t["trajectory_sha256"] for t in agg["trials"]]
    assert len(set(hashes)) == 2
    est = list(csv.DictReader(open(tmp_path / "estimates_pf.csv")))
    truth = list(csv.DictReader(open(tmp_path / "estimates_qtt.csv")))
    assert [r["true_state"] for r in est] == [r["true_state"] for r in truth]


def test_filter_failure_becomes_divergence(tmp_path):
    # a tiny observation variance overflows the assimilation factor
    cfg = small(run={"filters": ["qtt", "truth"], "trials": 1}, model={"s": 1e-9}, solver={"substeps": 1})
    agg = run_trials(cfg, tmp_path)
    assert agg["filters"]["qtt"]["errors"] == 1
    assert agg["filters"]["qtt"]["divergences"] == 1
    assert agg["filters"]["qtt"]["mean_rmse"] is None
    assert agg["filters"]["truth"]["mean_rmse"] == 0.0
    row = next(r for r in csv.DictReader(open(tmp_path / "trials.csv")) if r["filter"] == "qtt")
    assert "NumericalError" in row["error"]


# --- command line ------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(TOML)
    out = tmp_path / "out"
    assert main(["offline", "--config", str(cfg), "--out", str(out), "--allow-unstable"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["cache_hit"] is False
    assert main(["run", "--config", str(cfg), "--out", str(out), "--allow-unstable", "--seed", "9", "--ekf-literal"]) == 0
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["ekf_literal"] is True and agg["config"]["run"]["seed"] == 9
    densities = sorted((out / "density_trial0").glob("density_*.csv"))
    assert densities
    header = next(csv.reader(open(densities[0])))
    assert header == ["t", "axis", "x", "y", "value"]
    capsys.readouterr()
    assert main(["rmse", str(out / "estimates_qtt.csv")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert set(printed) == {"0", "1"}
    assert main(["export-density", "--config", str(cfg), "--out", str(out), "--allow-unstable", "--trial", "1", "--every", "1", "--axes", "0"]) == 0
    assert len(list((out / "density_trial1").glob("density_*.csv"))) == 6


def test_cli_reports_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[run]\nfilters = ['kalman']\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "kalman" in capsys.readouterr().err
