"""Benchmark scenarios, sweeps and cross-mode comparison.

A scenario is a small JSON document naming a scene source (a builder with
parameters, or a scene file), a solver configuration, a duration and the
channels to log. Runs write one CSV per channel plus ``summary.json`` and
``manifest.json`` into an output directory.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import builders
from .errors import ConfigError, LoopsimError, SchemaError
from .scene import (PerturbationSpec, SceneModel, chained_to_world, load, perturb_document,
                    project_to_constraints, read_document)
from .solver import Simulation, SolverConfig, StepRecord

SCENARIO_NAMES = ("four_bar", "crane_analog", "equilibrium_cylinder", "pendulum",
                  "chain_precision_sweep", "cfm_sweep")
CHANNELS = ("joint_forces", "violations", "energies", "diagnostics", "joint_coords")
FAILURE_VIOLATION = 0.1
SCENARIO_DIR = Path(__file__).with_name("scenarios")

EXIT_OK, EXIT_SIMULATION, EXIT_ASSERTION, EXIT_CONFIG = 0, 1, 2, 3

_SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["name", "scene", "duration"],
    "additionalProperties": False,
    "properties": {
        "name": {"enum": list(SCENARIO_NAMES)},
        "description": {"type": "string"},
        "scene": {
            "type": "object",
            "oneOf": [{"required": ["builder"]}, {"required": ["file"]}],
            "additionalProperties": False,
            "properties": {"builder": {"enum": sorted(builders.GENERATORS)},
                           "params": {"type": "object"},
                           "file": {"type": "string"}},
        },
        "convention": {"enum": ["world_frame", "chained_frame"]},
        "config": {"type": "object"},
        "duration": {"type": "number", "exclusiveMinimum": 0},
        "outputs": {"type": "array", "items": {"enum": list(CHANNELS)}, "uniqueItems": True},
        "critical_joint": {"type": "string"},
        "seed": {"type": "integer"},
        "strict_closure": {"type": "boolean"},
        "closure_tolerance": {"type": "number", "exclusiveMinimum": 0},
        "perturbation": {"type": "object"},
        "compare_tolerance": {"type": "number", "exclusiveMinimum": 0},
        "assertions": {"type": "array", "items": {"type": "object", "required": ["metric"]}},
        "sweep": {
            "type": "object",
            "required": ["kind", "values"],
            "properties": {"kind": {"enum": ["precision", "cfm"]},
                           "values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                           "conventions": {"type": "array",
                                           "items": {"enum": ["world_frame", "chained_frame"]}},
                           "expect": {"type": "array"}},
        },
    },
}


@dataclass
class Scenario:
    name: str
    scene: dict
    duration: float
    config: SolverConfig = field(default_factory=SolverConfig)
    convention: str = "chained_frame"
    outputs: list[str] = field(default_factory=lambda: list(CHANNELS))
    critical_joint: str | None = None
    seed: int = 0
    strict_closure: bool = False
    closure_tolerance: float = 1e-5
    perturbation: dict | None = None
    compare_tolerance: float = 1e-3
    assertions: list[dict] = field(default_factory=list)
    sweep: dict | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    def echo(self) -> dict:
        out = {k: copy.deepcopy(v) for k, v in self.__dict__.items() if k not in ("config", "base_dir")}
        out["config"] = config_dict(self.config)
        return out


def config_dict(config: SolverConfig) -> dict:
    return {k: v for k, v in asdict(config).items()}


def scenario_from_dict(doc: dict, base_dir: Path | None = None) -> Scenario:
    try:
        jsonschema.validate(doc, _SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"scenario invalid at {where}: {exc.message}") from None
    try:
        config = SolverConfig(**doc.get("config", {}))
    except TypeError as exc:
        raise ConfigError(f"unknown solver option: {exc}") from None
    kw = {k: doc[k] for k in ("convention", "critical_joint", "seed", "strict_closure",
                              "closure_tolerance", "perturbation", "compare_tolerance",
                              "assertions", "sweep") if k in doc}
    if "outputs" in doc:
        kw["outputs"] = list(doc["outputs"])
    return Scenario(doc["name"], copy.deepcopy(doc["scene"]), float(doc["duration"]), config,
                    base_dir=base_dir or Path.cwd(), **kw)


def load_scenario(source: str | Path) -> Scenario:
    """Scenario from a JSON file, or from a packaged scenario by bare name."""
    path = Path(source)
    if not path.exists() and (SCENARIO_DIR / f"{source}.json").exists():
        path = SCENARIO_DIR / f"{source}.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {source}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario {source} is not valid JSON: {exc}") from None
    return scenario_from_dict(doc, path.parent)


def with_overrides(scenario: Scenario, *, seed=None, dt=None, mode=None) -> Scenario:
    out = copy.deepcopy(scenario)
    changes = {}
    if dt is not None:
        changes["dt"] = float(dt)
    if mode is not None:
        changes["mode"] = {"pgs": "pgs_cfm", "direct": "eliminate_direct"}.get(mode, mode)
    if changes:
        out.config = SolverConfig(**{**config_dict(out.config), **changes})
    if seed is not None:
        out.seed = int(seed)
    return out


# --------------------------------------------------------------------------- scene preparation

def scene_document(scenario: Scenario) -> dict:
    src = scenario.scene
    if "builder" in src:
        try:
            return builders.GENERATORS[src["builder"]](**src.get("params", {}))
        except TypeError as exc:
            raise ConfigError(f"bad parameters for builder {src['builder']!r}: {exc}") from None
    path = Path(src["file"])
    if not path.is_absolute():
        path = scenario.base_dir / path
    return read_document(path)


def prepare_scene(scenario: Scenario, document: dict | None = None,
                  magnitude: float | None = None, convention: str | None = None) -> SceneModel:
    """Load the scenario's scene under ``convention``, optionally perturbed.

    World-frame loading perturbs body positions; chained loading perturbs the
    link vectors. With ``strict_closure`` a chained load must be closable to
    ``closure_tolerance`` or :class:`InconsistentInitialization` is raised.
    """
    doc = document if document is not None else scene_document(scenario)
    convention = convention or scenario.convention
    if convention == "world_frame" and doc.get("convention") == "chained_frame":
        doc = chained_to_world(doc)
    elif convention == "chained_frame" and doc.get("convention") != "chained_frame":
        raise ConfigError("a world-frame scene cannot be loaded under the chained_frame convention")
    pert = dict(scenario.perturbation or {})
    if magnitude is not None:
        pert["magnitude"] = magnitude
    if pert.get("magnitude", 0.0) > 0.0:
        spec = PerturbationSpec(float(pert["magnitude"]), pert.get("distribution", "per_axis_uniform"),
                                int(pert.get("seed", scenario.seed)))
        doc, _ = perturb_document(doc, spec)
    scene = load(doc)
    if scenario.strict_closure and convention == "chained_frame":
        scene, _ = project_to_constraints(scene, scenario.closure_tolerance)
    return scene


# --------------------------------------------------------------------------- running

def _num(x: float) -> str:
    return repr(float(x))


class _Sink:
    """Per-channel CSV writers with a fixed column order."""

    def __init__(self, out_dir: Path, channels: list[str], joints, coord_joints):
        self.out_dir = out_dir
        self.columns = {
            "joint_forces": ["time"] + [f"{j}.{c}" for j in joints for c in ("fx", "fy", "fz", "tx", "ty", "tz")],
            "violations": ["time", "max_position", "max_angle"] + [f"{j}.{c}" for j in joints for c in ("position", "angle")],
            "energies": ["time", "kinetic", "potential", "total"],
            "diagnostics": ["time", "iterations", "residual", "rank", "dropped", "singular"],
            "joint_coords": ["time"] + list(coord_joints),
        }
        self.channels = [c for c in CHANNELS if c in channels]
        self.buffers = {c: io.StringIO() for c in self.channels}
        self.writers = {c: csv.writer(self.buffers[c], lineterminator="\n") for c in self.channels}
        self.rows = {c: 0 for c in self.channels}
        for c in self.channels:
            self.writers[c].writerow(self.columns[c])
        self.joints = list(joints)
        self.coord_joints = list(coord_joints)

    def write(self, rec: StepRecord) -> None:
        t = _num(rec.time)
        for c in self.channels:
            if c == "joint_forces":
                row = [t]
                for j in self.joints:
                    f = rec.forces[j]
                    row += [_num(x) for x in f.force] + [_num(x) for x in f.torque]
            elif c == "violations":
                v = rec.violation
                row = [t, _num(v.max_position), _num(v.max_angle)]
                for j in self.joints:
                    row += [_num(v.position_error[j]), _num(v.angle_error[j])]
            elif c == "energies":
                row = [t, _num(rec.kinetic), _num(rec.potential), _num(rec.kinetic + rec.potential)]
            elif c == "diagnostics":
                d = rec.diagnostics
                row = [t, d.iterations_used, _num(d.residual), d.rank, len(d.dropped_rows), int(d.singular_flag)]
            else:
                row = [t] + [_num(rec.coordinates[j]) for j in self.coord_joints]
            self.writers[c].writerow(row)
            self.rows[c] += 1

    def flush(self) -> dict:
        files = {}
        for c in self.channels:
            data = self.buffers[c].getvalue().encode("utf-8")
            (self.out_dir / f"{c}.csv").write_bytes(data)
            files[c] = {"path": f"{c}.csv", "columns": self.columns[c], "rows": self.rows[c],
                        "sha256": hashlib.sha256(data).hexdigest()}
        return files


@dataclass
class RunOutcome:
    """Result of stepping one scene; ``status`` is ``stable`` or ``failed``."""
    status: str
    steps: int
    error_kind: str | None = None
    failed_step: int | None = None
    message: str = ""
    metrics: dict = field(default_factory=dict)
    records: list[StepRecord] = field(default_factory=list)


def simulate(scene: SceneModel, config: SolverConfig, duration: float,
             critical_joint: str | None = None, sink: _Sink | None = None,
             keep_records: bool = False) -> RunOutcome:
    """Step ``scene`` for ``duration`` and classify the run.

    A run fails on any solver error, a non-finite state or a joint violation
    above 0.1 m.
    """
    n = int(round(duration / config.dt))
    m = {"peak_violation": 0.0, "peak_angle_violation": 0.0, "peak_force": 0.0,
         "max_angular_speed": 0.0, "max_speed": 0.0}
    records = []
    try:
        sim = Simulation(scene, config)
    except ConfigError:
        raise
    except LoopsimError as exc:
        return RunOutcome("failed", 0, exc.kind, 0, str(exc), m)
    if critical_joint is not None and critical_joint not in {j.id for j in sim.joints}:
        raise ConfigError(f"critical joint {critical_joint!r} is not in the scene")
    step = 0
    rec = None
    try:
        for step in range(n):
            rec = sim.step()
            if sink is not None:
                sink.write(rec)
            if keep_records:
                records.append(rec)
            v = rec.violation
            m["peak_violation"] = max(m["peak_violation"], v.max_position)
            m["peak_angle_violation"] = max(m["peak_angle_violation"], v.max_angle)
            for b in sim.bodies:
                if b.is_dynamic:
                    m["max_speed"] = max(m["max_speed"], float(np.linalg.norm(b.twist.linear)))
                    m["max_angular_speed"] = max(m["max_angular_speed"],
                                                 float(np.linalg.norm(b.twist.angular)))
            if critical_joint is not None:
                m["peak_force"] = max(m["peak_force"], float(np.linalg.norm(rec.forces[critical_joint].force)))
            if v.max_position > FAILURE_VIOLATION:
                m["final_time"] = rec.time
                return RunOutcome("failed", step + 1, "ViolationLimit", step,
                                  f"joint violation {v.max_position:.3e} m exceeds {FAILURE_VIOLATION} m",
                                  m, records)
    except LoopsimError as exc:
        m["final_time"] = sim.time
        return RunOutcome("failed", step, exc.kind, exc.step if exc.step is not None else step,
                          str(exc), m, records)
    m["final_time"] = sim.time
    if rec is not None:
        m["final_violation"] = rec.violation.max_position
        m["final_kinetic"] = rec.kinetic
        m["final_energy"] = rec.kinetic + rec.potential
        if critical_joint is not None:
            m["critical_force"] = [float(x) for x in rec.forces[critical_joint].force]
            m["critical_torque"] = [float(x) for x in rec.forces[critical_joint].torque]
        m["final_angular_speed"] = max((float(np.linalg.norm(b.twist.angular)) for b in sim.bodies
                                        if b.is_dynamic), default=0.0)
    return RunOutcome("stable", n, metrics=m, records=records)


def check_assertions(assertions: list[dict], outcome: RunOutcome) -> list[dict]:
    """Evaluate ``{"metric", "max" | "min" | "equals" [, "tol", "index"]}`` entries."""
    results = []
    facts = {**outcome.metrics, "status": outcome.status, "error_kind": outcome.error_kind,
             "failed_step": outcome.failed_step, "steps": outcome.steps}
    for a in assertions:
        name = a["metric"]
        if name not in facts:
            results.append({**a, "value": None, "passed": False, "reason": "metric unavailable"})
            continue
        value = facts[name]
        if "index" in a and value is not None:
            value = value[a["index"]]
        passed = True
        if "max" in a:
            passed &= value is not None and value <= a["max"]
        if "min" in a:
            passed &= value is not None and value >= a["min"]
        if "equals" in a:
            if isinstance(a["equals"], str) or value is None:
                passed &= value == a["equals"]
            else:
                passed &= abs(value - a["equals"]) <= a.get("tol", 0.0)
        results.append({**a, "value": value, "passed": bool(passed)})
    return results


@dataclass
class RunResult:
    exit_status: int
    outcome: RunOutcome
    assertions: list[dict]
    files: dict
    out_dir: Path
    wall_clock: float


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not serializable: {type(x)}")


def default_out_dir() -> Path:
    return Path(os.environ.get("LOOPSIM_OUT", "loopsim_out"))


def run_scenario(scenario: Scenario, out_dir: str | Path | None = None) -> RunResult:
    """Run one scenario and write its CSVs, ``summary.json`` and ``manifest.json``."""
    out = Path(out_dir) if out_dir is not None else default_out_dir() / scenario.name
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    outcome: RunOutcome
    files = {}
    try:
        scene = prepare_scene(scenario)
    except SchemaError as exc:
        raise ConfigError(f"scene invalid at {exc.path}: {exc}") from None
    except ConfigError:
        raise
    except LoopsimError as exc:
        outcome = RunOutcome("failed", 0, exc.kind, exc.step if exc.step is not None else 0, str(exc))
    else:
        coord = [j.id for j in scene.joints if j.kind in ("revolute", "prismatic")]
        sink = _Sink(out, scenario.outputs, [j.id for j in scene.joints], coord)
        outcome = simulate(scene, scenario.config, scenario.duration, scenario.critical_joint, sink)
        files = sink.flush()
    wall = time.perf_counter() - start
    checks = check_assertions(scenario.assertions, outcome)
    if outcome.status == "failed":
        status = EXIT_SIMULATION
    elif not all(c["passed"] for c in checks):
        status = EXIT_ASSERTION
    else:
        status = EXIT_OK
    summary = {"scenario": scenario.echo(), "exit_status": status, "status": outcome.status,
               "error_kind": outcome.error_kind, "failed_step": outcome.failed_step,
               "message": outcome.message, "steps": outcome.steps, "metrics": outcome.metrics,
               "assertions": checks, "wall_clock_s": wall}
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", {"scenario": scenario.name, "channels": files,
                                        "summary": "summary.json"})
    return RunResult(status, outcome, checks, files, out, wall)


# --------------------------------------------------------------------------- sweeps

@dataclass
class SweepPoint:
    value: float
    status: str
    failed_step: int | None = None
    error_kind: str | None = None
    peak_violation: float = 0.0
    peak_force: float = 0.0
    closure_residual: float | None = None


@dataclass
class SweepResult:
    axis: str
    label: str
    points: list[SweepPoint]

    @property
    def values(self) -> list[float]:
        return [p.value for p in self.points]

    def outcome(self, value: float) -> SweepPoint:
        for p in self.points:
            if p.value == value:
                return p
        raise KeyError(value)

    def rows(self) -> list[list]:
        return [[self.label, _num(p.value), p.status, "" if p.failed_step is None else p.failed_step,
                 p.error_kind or "", _num(p.peak_violation), _num(p.peak_force),
                 "" if p.closure_residual is None else _num(p.closure_residual)] for p in self.points]


SWEEP_COLUMNS = ["label", "value", "outcome", "failed_step", "error_kind", "peak_violation",
                 "peak_force", "closure_residual"]


def _sweep_point(value, outcome: RunOutcome, residual=None) -> SweepPoint:
    return SweepPoint(float(value), outcome.status, outcome.failed_step, outcome.error_kind,
                      float(outcome.metrics.get("peak_violation", 0.0)),
                      float(outcome.metrics.get("peak_force", 0.0)), residual)


def run_precision_sweep(scenario: Scenario, magnitudes,
                        conventions=("world_frame", "chained_frame")) -> dict[str, SweepResult]:
    """Perturbation magnitude against stable/failed, once per loading convention."""
    magnitudes = [float(x) for x in magnitudes]
    if magnitudes != sorted(magnitudes):
        raise ConfigError("precision sweep magnitudes must be sorted ascending")
    base = scene_document(scenario)
    results = {}
    for conv in conventions:
        points = []
        for mag in magnitudes:
            try:
                scene = prepare_scene(scenario, copy.deepcopy(base), mag, conv)
            except (ConfigError, SchemaError):
                raise
            except LoopsimError as exc:
                points.append(SweepPoint(mag, "failed", exc.step if exc.step is not None else 0, exc.kind))
                continue
            residual = scene.load_report.get("max_closure_residual")
            outcome = simulate(scene, scenario.config, scenario.duration, scenario.critical_joint)
            points.append(_sweep_point(mag, outcome, residual))
        results[conv] = SweepResult("perturbation_magnitude", conv, points)
    return results


def run_cfm_sweep(scenario: Scenario, values) -> SweepResult:
    """Peak joint violation against the constraint-force-mixing value (pgs_cfm mode)."""
    values = sorted(float(v) for v in values)
    if any(v <= 0 for v in values):
        raise ConfigError("cfm values must be > 0")
    scene = prepare_scene(scenario)
    points = []
    for v in values:
        config = SolverConfig(**{**config_dict(scenario.config), "mode": "pgs_cfm", "cfm_default": v})
        points.append(_sweep_point(v, simulate(scene, config, scenario.duration, scenario.critical_joint)))
    return SweepResult("cfm", "pgs_cfm", points)


def check_expectations(expect: list[dict], results: dict[str, SweepResult]) -> list[dict]:
    out = []
    for e in expect:
        res = results.get(e.get("label", next(iter(results))))
        try:
            got = res.outcome(float(e["value"])).status if res else None
        except KeyError:
            got = None
        out.append({**e, "got": got, "passed": got == e["outcome"]})
    return out


def write_sweep(results: dict[str, SweepResult], out_dir: Path, name: str, scenario: Scenario,
                checks: list[dict], wall: float) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for res in results.values():
        w.writerows(res.rows())
    data = buf.getvalue().encode("utf-8")
    (out_dir / f"{name}.csv").write_bytes(data)
    files = {name: {"path": f"{name}.csv", "columns": SWEEP_COLUMNS,
                    "rows": sum(len(r.points) for r in results.values()),
                    "sha256": hashlib.sha256(data).hexdigest()}}
    _write_json(out_dir / "summary.json", {"scenario": scenario.echo(), "expectations": checks,
                                           "results": {k: [asdict(p) for p in r.points]
                                                       for k, r in results.items()},
                                           "wall_clock_s": wall})
    _write_json(out_dir / "manifest.json", {"scenario": scenario.name, "channels": files,
                                            "summary": "summary.json"})
    return files


# --------------------------------------------------------------------------- mode comparison

@dataclass
class CompareReport:
    joint: str
    max_difference: float
    rms_difference: float
    tolerance: float
    passed: bool
    max_angle_difference: float
    times: np.ndarray
    differences: np.ndarray
    statuses: dict[str, str]


def compare_modes(scenario: Scenario, duration: float | None = None) -> CompareReport:
    """Run both solver modes on the same scene and diff the critical joint's reaction force."""
    if scenario.critical_joint is None:
        raise ConfigError("compare needs a scenario with a critical_joint")
    scene = prepare_scene(scenario)
    duration = duration or scenario.duration
    runs = {}
    for mode in ("pgs_cfm", "eliminate_direct"):
        config = SolverConfig(**{**config_dict(scenario.config), "mode": mode})
        runs[mode] = simulate(scene, config, duration, scenario.critical_joint, keep_records=True)
    a, b = runs["pgs_cfm"].records, runs["eliminate_direct"].records
    n = min(len(a), len(b))
    j = scenario.critical_joint
    diff = np.array([np.linalg.norm(a[i].forces[j].force - b[i].forces[j].force) for i in range(n)])
    ang = 0.0
    for i in range(n):
        for k, v in a[i].coordinates.items():
            ang = max(ang, abs(v - b[i].coordinates[k]))
    both = all(r.status == "stable" for r in runs.values())
    mx = float(diff.max()) if n else math.inf
    rms = float(np.sqrt(np.mean(diff ** 2))) if n else math.inf
    return CompareReport(j, mx, rms, scenario.compare_tolerance,
                         both and mx <= scenario.compare_tolerance, ang,
                         np.array([a[i].time for i in range(n)]), diff,
                         {k: v.status for k, v in runs.items()})


def write_compare(report: CompareReport, out_dir: Path, scenario: Scenario, wall: float) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "force_difference"])
    for t, d in zip(report.times, report.differences):
        w.writerow([_num(t), _num(d)])
    data = buf.getvalue().encode("utf-8")
    (out_dir / "compare.csv").write_bytes(data)
    files = {"compare": {"path": "compare.csv", "columns": ["time", "force_difference"],
                         "rows": len(report.times), "sha256": hashlib.sha256(data).hexdigest()}}
    summary = {k: v for k, v in asdict(report).items() if k not in ("times", "differences")}
    summary.update(scenario=scenario.echo(), wall_clock_s=wall)
    _write_json(out_dir / "summary.json", summary)
    _write_json(out_dir / "manifest.json", {"scenario": scenario.name, "channels": files,
                                            "summary": "summary.json"})
    return files
