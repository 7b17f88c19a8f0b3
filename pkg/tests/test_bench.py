import csv
import dataclasses
import hashlib
import json

import numpy as np
import pytest

from loopsim import bench, builders, cli
from loopsim.errors import ConfigError
from loopsim.scene import PerturbationSpec, load, perturb


def _short(name, duration=0.2, **changes):
    return dataclasses.replace(bench.load_scenario(name), duration=duration, **changes)


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --------------------------------------------------------------------------- scenarios

@pytest.mark.parametrize("name", bench.SCENARIO_NAMES)
def test_packaged_scenarios_load(name):
    sc = bench.load_scenario(name)
    assert sc.name == name and sc.duration > 0
    assert load(bench.scene_document(sc)).bodies


@pytest.mark.parametrize("doc", [
    {"name": "pendulum", "scene": {"builder": "pendulum"}, "duration": 0},
    {"name": "pendulum", "scene": {"builder": "pendulum"}, "duration": 1, "outputs": ["plots"]},
    {"name": "bogus", "scene": {"builder": "pendulum"}, "duration": 1},
    {"name": "pendulum", "scene": {"builder": "pendulum"}, "duration": 1, "config": {"mode": "rk4"}},
    {"name": "pendulum", "scene": {"builder": "pendulum"}, "duration": 1, "config": {"sweeps": 3}},
    {"name": "pendulum", "scene": {"builder": "pendulum", "params": {"legs": 3}}, "duration": 1},
])
def test_invalid_scenarios_are_config_errors(doc, tmp_path):
    with pytest.raises(ConfigError):
        sc = bench.scenario_from_dict(doc)
        bench.run_scenario(sc, tmp_path)


def test_overrides():
    sc = bench.with_overrides(bench.load_scenario("four_bar"), seed=7, dt=5e-4, mode="direct")
    assert (sc.seed, sc.config.dt, sc.config.mode) == (7, 5e-4, "eliminate_direct")
    assert bench.load_scenario("four_bar").config.mode == "pgs_cfm"


# --------------------------------------------------------------------------- runs

def test_pendulum_run_writes_full_logs(tmp_path):
    res = bench.run_scenario(bench.load_scenario("pendulum"), tmp_path)
    assert res.exit_status == bench.EXIT_OK
    rows = _csv(tmp_path / "joint_forces.csv")
    assert rows[0][:4] == ["time", "pivot.fx", "pivot.fy", "pivot.fz"]
    assert len(rows) == 1001
    assert abs(float(rows[-1][3]) - 9.81) < 1e-6
    times = np.array([float(r[0]) for r in rows[1:]])
    assert np.all(np.diff(times) > 0) and np.allclose(np.diff(times), 1e-3)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    for entry in manifest["channels"].values():
        data = (tmp_path / entry["path"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == entry["sha256"]
        assert data.count(b"\n") == entry["rows"] + 1
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["scenario"]["config"]["cfm_default"] == 1e-10
    assert all(a["passed"] for a in summary["assertions"]) and summary["wall_clock_s"] > 0


def test_csv_is_byte_identical_across_runs(tmp_path):
    sc = _short("crane_analog", 0.05, perturbation={"magnitude": 1e-4})
    bench.run_scenario(sc, tmp_path / "a")
    bench.run_scenario(sc, tmp_path / "b")
    for ch in bench.CHANNELS:
        assert (tmp_path / "a" / f"{ch}.csv").read_bytes() == (tmp_path / "b" / f"{ch}.csv").read_bytes()


def test_seed_changes_perturbed_output(tmp_path):
    sc = _short("four_bar", 0.05, perturbation={"magnitude": 1e-4})
    bench.run_scenario(sc, tmp_path / "a")
    bench.run_scenario(bench.with_overrides(sc, seed=1), tmp_path / "b")
    assert (tmp_path / "a" / "joint_coords.csv").read_bytes() != (tmp_path / "b" / "joint_coords.csv").read_bytes()


def test_singular_cylinder_is_a_simulation_failure(tmp_path):
    sc = bench.with_overrides(bench.load_scenario("equilibrium_cylinder"), mode="direct")
    res = bench.run_scenario(sc, tmp_path)
    assert res.exit_status == bench.EXIT_SIMULATION
    assert (res.outcome.error_kind, res.outcome.failed_step) == ("SingularSystem", 0)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["error_kind"] == "SingularSystem"


def test_cylinder_under_pgs_stays_at_rest(tmp_path):
    res = bench.run_scenario(bench.load_scenario("equilibrium_cylinder"), tmp_path)
    assert res.exit_status == bench.EXIT_OK
    assert res.outcome.metrics["max_angular_speed"] <= 1e-9


def test_failed_assertion_exit_status(tmp_path):
    sc = _short("pendulum", assertions=[{"metric": "peak_force", "max": 1.0}])
    assert bench.run_scenario(sc, tmp_path).exit_status == bench.EXIT_ASSERTION


def test_missing_metric_fails_assertion(tmp_path):
    sc = _short("pendulum", assertions=[{"metric": "warp_factor", "max": 1.0}])
    res = bench.run_scenario(sc, tmp_path)
    assert res.exit_status == bench.EXIT_ASSERTION
    assert res.assertions[0]["reason"] == "metric unavailable"


def test_large_violation_classified_as_failure():
    scene = load(builders.four_bar())
    broken, _ = perturb(scene, PerturbationSpec(0.5, "fixed_offset", targets="anchors"), only=["D"])
    out = bench.simulate(broken, bench.load_scenario("four_bar").config, 0.1)
    assert out.status == "failed" and out.error_kind == "ViolationLimit"
    assert out.failed_step == 0


def test_unknown_critical_joint_is_config_error():
    scene = load(builders.pendulum())
    with pytest.raises(ConfigError):
        bench.simulate(scene, bench.load_scenario("pendulum").config, 0.01, critical_joint="hip")


def test_requested_channels_only(tmp_path):
    sc = _short("pendulum", outputs=["energies"], assertions=[])
    res = bench.run_scenario(sc, tmp_path)
    assert set(res.files) == {"energies"}
    assert not (tmp_path / "joint_forces.csv").exists()


# --------------------------------------------------------------------------- sweeps and compare

def test_cfm_sweep_one_row_per_value():
    values = [1e-4, 1e-9, 1e-6]
    res = bench.run_cfm_sweep(_short("cfm_sweep", 0.1), values)
    assert res.values == sorted(values)
    assert len(res.rows()) == len(values)


def test_cfm_sweep_rejects_non_positive():
    with pytest.raises(ConfigError):
        bench.run_cfm_sweep(_short("cfm_sweep", 0.1), [0.0, 1e-9])


def test_precision_sweep_covers_every_value():
    sc = _short("four_bar", 0.1)
    res = bench.run_precision_sweep(sc, [1e-6, 1e-3])
    assert set(res) == {"world_frame", "chained_frame"}
    for r in res.values():
        assert r.values == [1e-6, 1e-3]
        assert all(p.status == "stable" for p in r.points)
    assert res["chained_frame"].outcome(1e-3).closure_residual > 0
    with pytest.raises(ConfigError):
        bench.run_precision_sweep(sc, [1e-3, 1e-6])


def test_strict_closure_failure_carries_step_and_kind():
    sc = bench.load_scenario("chain_precision_sweep")
    sc = dataclasses.replace(sc, duration=0.05)
    res = bench.run_precision_sweep(sc, [1e-3], ["chained_frame"])
    p = res["chained_frame"].outcome(1e-3)
    assert (p.status, p.error_kind, p.failed_step) == ("failed", "InconsistentInitialization", 0)


def test_write_sweep(tmp_path):
    sc = _short("cfm_sweep", 0.05)
    results = {"pgs_cfm": bench.run_cfm_sweep(sc, [1e-9, 1e-6])}
    checks = bench.check_expectations([{"value": 1e-9, "outcome": "stable"}], results)
    bench.write_sweep(results, tmp_path, "cfm_sweep", sc, checks, 0.0)
    rows = _csv(tmp_path / "cfm_sweep.csv")
    assert rows[0] == bench.SWEEP_COLUMNS and len(rows) == 3
    assert checks[0]["passed"]


def test_pendulum_modes_agree():
    rep = bench.compare_modes(bench.load_scenario("pendulum"))
    assert rep.passed and rep.max_difference < 1e-6
    assert rep.statuses == {"pgs_cfm": "stable", "eliminate_direct": "stable"}


def test_compare_requires_critical_joint():
    with pytest.raises(ConfigError):
        bench.compare_modes(_short("pendulum", critical_joint=None))


# --------------------------------------------------------------------------- command line

def test_cli_run(tmp_path, capsys):
    assert cli.main(["run", "pendulum", "--out", str(tmp_path)]) == 0
    assert "stable after 1000 steps" in capsys.readouterr().out
    assert (tmp_path / "manifest.json").exists()


def test_cli_default_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LOOPSIM_OUT", str(tmp_path))
    assert cli.main(["run", "equilibrium_cylinder", "--dt", "0.01"]) == 0
    assert (tmp_path / "equilibrium_cylinder" / "joint_coords.csv").exists()


def test_cli_direct_singular_exit(tmp_path, capsys):
    assert cli.main(["run", "equilibrium_cylinder", "--mode", "direct", "--out", str(tmp_path)]) == 1
    assert "SingularSystem at step 0" in capsys.readouterr().out


def test_cli_config_errors(tmp_path, capsys):
    assert cli.main(["run", "no_such_scenario", "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", str(bad), "--out", str(tmp_path)]) == 3
    assert "configuration error" in capsys.readouterr().err


def test_cli_scenario_file_with_scene_file(tmp_path):
    from loopsim.scene import write_document
    write_document(builders.pendulum(), tmp_path / "scene.json")
    sc = {"name": "pendulum", "scene": {"file": "scene.json"}, "duration": 0.01,
          "critical_joint": "pivot"}
    (tmp_path / "sc.json").write_text(json.dumps(sc))
    assert cli.main(["run", str(tmp_path / "sc.json"), "--out", str(tmp_path / "out")]) == 0


def test_cli_sweep_cfm(tmp_path):
    sc = json.loads((bench.SCENARIO_DIR / "cfm_sweep.json").read_text())
    sc["duration"] = 0.05
    (tmp_path / "sc.json").write_text(json.dumps(sc))
    cli.main(["sweep", "cfm", str(tmp_path / "sc.json"), "--values", "1e-9", "1e-5", "--out", str(tmp_path)])
    assert len(_csv(tmp_path / "cfm_sweep.csv")) == 3


def test_cli_analyze(capsys):
    assert cli.main(["analyze", "crane_analog"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["independent_loop_count"] == 6 and report["body_count"] == 21


def test_cli_compare(tmp_path, capsys):
    assert cli.main(["compare", "pendulum", "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out
    assert len(_csv(tmp_path / "compare" / "compare.csv")) == 1001
