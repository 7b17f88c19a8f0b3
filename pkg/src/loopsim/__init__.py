"""Maximal-coordinate rigid-body engine for closed-loop mechanisms."""

from .constraints import (WORLD, ConstraintRow, Joint, MotorParams, StabilizationParams,
                          ViolationReport, damping_rows, joint_rows, measure_violation, motor_rows)
from .dynamics import (ForceAccumulator, Pose, RigidBody, Twist, assemble_mass_matrix,
                       integrate_semi_implicit, system_energy, world_inertia)
from .scene import (GraphReport, PerturbationSpec, SceneModel, analyze_graph, chained_to_world,
                    load, load_chained_frame, load_world_frame, perturb, serialize)
from .solver import (Simulation, SolveDiagnostics, SolverConfig, StepRecord, assemble_system,
                     detect_redundant, direct_solve, pgs_solve, solve_step)

from .bench import (Scenario, SweepResult, compare_modes, load_scenario, run_cfm_sweep,
                    run_precision_sweep, run_scenario)

__version__ = "0.1.0"

__all__ = [
    "WORLD", "ConstraintRow", "Joint", "MotorParams", "StabilizationParams", "ViolationReport",
    "damping_rows", "joint_rows", "measure_violation", "motor_rows",
    "ForceAccumulator", "Pose", "RigidBody", "Twist", "assemble_mass_matrix",
    "integrate_semi_implicit", "system_energy", "world_inertia",
    "GraphReport", "PerturbationSpec", "SceneModel", "analyze_graph", "chained_to_world", "load",
    "load_chained_frame", "load_world_frame", "perturb", "serialize",
    "Simulation", "SolveDiagnostics", "SolverConfig", "StepRecord", "assemble_system",
    "detect_redundant", "direct_solve", "pgs_solve", "solve_step",
    "Scenario", "SweepResult", "compare_modes", "load_scenario", "run_cfm_sweep",
    "run_precision_sweep", "run_scenario",
]
