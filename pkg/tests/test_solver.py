import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from loopsim import builders
from loopsim.constraints import WORLD, Joint
from loopsim.dynamics import ForceAccumulator, Pose, RigidBody, Twist
from loopsim.errors import ConfigError, NonFiniteLambda, SingularSystem
from loopsim.scene import SceneModel, load
from loopsim.solver import (SolverConfig, Simulation, assemble_system, detect_redundant,
                            direct_solve, dynamic_index, independent_rows, pgs_solve,
                            solve_step, stack_jacobian)

PGS_TIGHT = SolverConfig(cfm_default=1e-10, iterations=200, tolerance=0.0)
DIRECT = SolverConfig(mode="eliminate_direct")


def _spd(seed, n):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    return M @ M.T + n * np.eye(n), rng.normal(size=n)


# --------------------------------------------------------------------------- linear solvers

def test_pgs_scalar_system_in_one_sweep():
    lam, diag = pgs_solve(np.array([[2.0]]), np.array([4.0]), config=SolverConfig(iterations=1))
    assert lam[0] == 2.0 and diag.iterations_used == 1


@pytest.mark.parametrize("seed", range(5))
def test_pgs_matches_dense_solve(seed):
    A, b = _spd(seed, 10)
    lam, diag = pgs_solve(A, b, config=SolverConfig(iterations=500, tolerance=1e-14))
    assert np.allclose(lam, np.linalg.solve(A, b), atol=1e-8)
    assert diag.residual < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_direct_matches_dense_solve(seed):
    A, b = _spd(seed, 12)
    lam, diag = direct_solve(A, b)
    assert np.allclose(lam, np.linalg.solve(A, b), rtol=1e-12, atol=1e-12)
    assert not diag.singular_flag


def test_duplicated_row_splits_equally():
    # J = [1; 1], M = 1, cfm/dt = 0.1: the regularized fixed point is symmetric
    A = np.array([[1.1, 1.0], [1.0, 1.1]])
    lam, _ = pgs_solve(A, np.array([2.0, 2.0]), config=SolverConfig(iterations=500, tolerance=0.0),
                       warm_start=np.array([1.0, 1.0]))
    assert abs(lam[0] - lam[1]) < 1e-9
    assert math.isclose(lam.sum(), 4.0 / 2.1, rel_tol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12))
def test_pgs_energy_norm_residual_never_increases(seed, n):
    # Gauss-Seidel decreases ||A lam - b|| measured in the A^-1 norm every sweep;
    # the plain 2-norm carries no such guarantee
    A, b = _spd(seed, n)
    Ainv = np.linalg.inv(A)
    lam = np.zeros(n)
    prev = floor = float(b @ Ainv @ b)
    for _ in range(30):
        lam, _ = pgs_solve(A, b, config=SolverConfig(iterations=1), warm_start=lam)
        r = A @ lam - b
        cur = float(r @ Ainv @ r)
        assert cur <= prev + 1e-14 * floor
        prev = cur


def _box_oracle(A, b, lo, hi):
    res = minimize(lambda x: 0.5 * x @ A @ x - b @ x, np.zeros(len(b)), jac=lambda x: A @ x - b,
                   bounds=list(zip(lo, hi)), method="L-BFGS-B",
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000})
    return res.x


@pytest.mark.parametrize("seed", range(4))
def test_bounded_rows_match_box_qp(seed):
    A, b = _spd(seed, 6)
    b *= 5
    lo, hi = -np.full(6, 0.3), np.full(6, 0.3)
    lo[:3], hi[:3] = -np.inf, np.inf
    ref = _box_oracle(A, b, lo, hi)
    lam_p, _ = pgs_solve(A, b, (lo, hi), SolverConfig(iterations=2000, tolerance=1e-15))
    assert np.allclose(lam_p, ref, atol=1e-6)
    lam_d, _ = direct_solve(A, b, bounds=(lo, hi))
    assert np.all(lam_d >= lo - 1e-12) and np.all(lam_d <= hi + 1e-12)
    assert np.allclose(lam_d, lam_p, atol=1e-6)


def test_empty_systems():
    lam, diag = pgs_solve(np.zeros((0, 0)), np.zeros(0))
    assert lam.shape == (0,) and diag.iterations_used == 0
    lam, diag = direct_solve(np.zeros((0, 0)), np.zeros(0))
    assert lam.shape == (0,) and not diag.singular_flag


def test_direct_rejects_singular_matrix():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularSystem):
        direct_solve(A, np.ones(2))
    _, diag = direct_solve(A, np.ones(2), require_unique=False)
    assert diag.singular_flag and diag.rank == 1


def test_pgs_rejects_non_positive_diagonal():
    with pytest.raises(NonFiniteLambda):
        pgs_solve(np.array([[0.0]]), np.array([1.0]))


@pytest.mark.parametrize("kwargs", [dict(mode="lcp"), dict(iterations=0), dict(rank_tolerance=0.0),
                                    dict(dt=0.0), dict(cfm_default=-1.0)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        SolverConfig(**kwargs)


# --------------------------------------------------------------------------- assembly

def _com_pendulum():
    bob = RigidBody("bob", 2.0, np.diag([0.1, 0.2, 0.3]), pose=Pose([0.0, 0.0, -1.0]))
    joint = Joint("pivot", "spherical", WORLD, "bob", Pose([0.0, 0.0, -1.0]), Pose())
    return bob, joint


def test_point_rows_at_centre_of_mass_give_inverse_mass():
    bob, joint = _com_pendulum()
    sim = Simulation(SceneModel([bob], [joint]))
    A, b = assemble_system(sim.build_rows(), sim.bodies, [ForceAccumulator()], 0.01)
    assert np.allclose(A, np.eye(3) / 2.0, atol=1e-15)


def test_duplicated_row_without_cfm_is_singular():
    bob, joint = _com_pendulum()
    sim = Simulation(SceneModel([bob], [joint]), DIRECT)
    row = sim.build_rows()[0]
    assert row.cfm == 0.0
    A, _ = assemble_system([row, row], sim.bodies, [ForceAccumulator()], 0.01)
    assert abs(np.linalg.det(A)) < 1e-15


def test_assembled_rhs_uses_free_velocity():
    bob, joint = _com_pendulum()
    bob.twist = Twist(linear=np.array([1.0, 0.0, 0.0]))
    sim = Simulation(SceneModel([bob], [joint]))
    acc = ForceAccumulator(force=np.array([0.0, 0.0, -19.62]))
    _, b = assemble_system(sim.build_rows(), sim.bodies, [acc], 0.01)
    assert np.allclose(b, [-1.0, 0.0, 0.0981])


# --------------------------------------------------------------------------- redundancy

def _rows(doc):
    sim = Simulation(load(doc))
    return sim.build_rows(), sim.bodies


def test_four_bar_has_three_redundant_rows():
    rows, bodies = _rows(builders.four_bar())
    rank, dropped = detect_redundant(rows, bodies)
    assert (len(rows), rank, len(dropped)) == (20, 17, 3)
    # the dropped rows all belong to the closing joint
    assert {jid for jid, _ in dropped} == {"D"}


def test_double_pendulum_has_no_redundancy():
    rows, bodies = _rows(builders.serial_chain(2))
    assert detect_redundant(rows, bodies) == (10, [])


def test_coincident_revolutes_drop_one_copy():
    body = RigidBody("b", 1.0, np.eye(3), pose=Pose([1.0, 0.0, 0.0]))
    hinge = dict(kind="revolute", parent=WORLD, child="b", anchor_child=Pose([-1.0, 0.0, 0.0]))
    joints = [Joint("h1", **hinge), Joint("h2", **hinge)]
    sim = Simulation(SceneModel([body], joints))
    rank, dropped = detect_redundant(sim.build_rows(), sim.bodies)
    assert rank == 5 and dropped == [("h2", i) for i in range(5)]


def test_elimination_leaves_full_row_rank():
    rows, bodies = _rows(builders.crane_analog())
    J = stack_jacobian(rows, dynamic_index(bodies), len(bodies))
    keep = independent_rows(J, 1e-6)
    kept = J[keep]
    assert np.linalg.matrix_rank(kept) == kept.shape[0]
    for k in np.flatnonzero(~keep):
        assert np.linalg.matrix_rank(np.vstack((kept, J[k]))) == kept.shape[0]


# --------------------------------------------------------------------------- stepping

def test_hanging_pendulum_reaction_equals_weight():
    sim = Simulation(load(builders.pendulum()), PGS_TIGHT)
    for _ in range(10):
        rec = sim.step()
    f = rec.forces["pivot"]
    assert math.isclose(f.force[2], 9.81, abs_tol=1e-6)
    assert np.allclose(f.parent_force, -f.force)


def test_serial_pendulum_solvers_agree_on_one_system():
    # a rod, so the 5x5 system is well conditioned
    sim = Simulation(load(builders.serial_chain(1, angles=[-1.0])))
    A, b = assemble_system(sim.build_rows(), sim.bodies,
                           [ForceAccumulator(force=b.mass * sim.gravity) for b in sim.bodies],
                           sim.config.dt)
    assert A.shape == (5, 5)
    lam_d, _ = direct_solve(A, b)
    lam_p, _ = pgs_solve(A, b, config=SolverConfig(iterations=2000, tolerance=0.0))
    assert np.allclose(lam_p, lam_d, atol=1e-8)


def test_free_pair_conserves_momentum():
    # no gravity, no world joint: joint impulses are internal, so momentum is exact
    a = RigidBody("a", 1.0, np.diag([0.1, 0.2, 0.3]), twist=Twist(np.array([0.3, 0, 0]), np.array([0, 1.0, 2.0])))
    b = RigidBody("b", 3.0, np.diag([0.5, 0.4, 0.3]), pose=Pose([1.0, 0.0, 0.0]),
                  twist=Twist(np.array([0, -0.2, 0.1]), np.array([1.0, 0, 0])))
    joint = Joint("j", "revolute", "a", "b", Pose([0.5, 0, 0]), Pose([-0.5, 0, 0]), [0, 1.0, 1.0])
    sim = Simulation(SceneModel([a, b], [joint], gravity=np.zeros(3)), DIRECT)
    p0 = sum(x.mass * x.twist.linear for x in sim.bodies)
    for _ in range(200):
        rec = sim.step()
        f = rec.forces["j"]
        assert np.allclose(f.parent_force, -f.force, rtol=1e-9, atol=0)
        assert np.allclose(f.parent_torque, -f.torque, rtol=1e-9, atol=0)
    assert np.allclose(sum(x.mass * x.twist.linear for x in sim.bodies), p0, atol=1e-12)


def test_force_record_is_net_row_impulse_over_dt():
    sim = Simulation(load(builders.pendulum(angle=-0.5)), DIRECT)
    J = sim.assemble()[0]
    rec = sim.step()
    lam = sim._warm
    # bob is body 0: net linear impulse on it over dt
    assert np.allclose(rec.forces["pivot"].force, (J.T @ lam)[:3] / sim.config.dt, rtol=1e-12)


@pytest.mark.parametrize("mode", ["pgs_cfm", "eliminate_direct"])
def test_runs_are_bit_identical(mode):
    def trace():
        sim = Simulation(load(builders.four_bar(drive_rate=0.5)), SolverConfig(mode=mode))
        out = []
        for _ in range(100):
            rec = sim.step()
            out.append(np.concatenate([np.r_[f.force, f.torque] for f in rec.forces.values()]))
        return np.array(out), np.array([b.pose.orientation for b in sim.bodies])
    (f1, q1), (f2, q2) = trace(), trace()
    assert np.array_equal(f1, f2) and np.array_equal(q1, q2)


POINT_BOB = pytest.mark.xfail(
    strict=True, reason="200 PGS sweeps under-converge when a 1e-3 kg m^2 bob sits on a 1 m lever")


@pytest.mark.parametrize("doc", [builders.serial_chain(2), builders.serial_chain(3, angles=[-1.0, 0.2, 1.1]),
                                 pytest.param(builders.pendulum(angle=-0.3), marks=POINT_BOB)],
                         ids=["double", "triple", "point_bob"])
def test_tree_scenes_agree_across_modes(doc):
    pgs = Simulation(load(doc), PGS_TIGHT)
    direct = Simulation(load(doc), DIRECT)
    for _ in range(200):
        rp, rd = pgs.step(), direct.step()
        for jid, fd in rd.forces.items():
            fp = rp.forces[jid]
            scale = max(np.linalg.norm(fd.force), 1e-12)
            assert np.linalg.norm(fp.force - fd.force) <= 1e-6 * scale, jid


def test_motor_holds_four_bar_still():
    doc = builders.four_bar(motor={"mode": "velocity_drive", "target": 0.0, "max_force": 1e4})
    sim = Simulation(load(doc), DIRECT)
    for _ in range(500):
        sim.step()
        for b in sim.bodies:
            assert np.linalg.norm(b.twist.linear) < 1e-9
            assert np.linalg.norm(b.twist.angular) < 1e-9


def test_four_bar_energy_drift_per_period():
    # released four-bar, one swing period (about 1.37 s); drift against peak kinetic energy
    sim = Simulation(load(builders.four_bar()), SolverConfig(dt=1e-4))
    energies, kinetic = [], []
    for _ in range(14000):
        rec = sim.step()
        energies.append(rec.kinetic + rec.potential)
        kinetic.append(rec.kinetic)
    drift = (max(energies) - min(energies)) / max(kinetic)
    assert drift < 1e-2


def test_static_equilibrium_mode_split():
    doc = builders.equilibrium_cylinder()
    with pytest.raises(SingularSystem):
        Simulation(load(doc), DIRECT).step()
    sim = Simulation(load(doc))
    for _ in range(100):
        sim.step()
        assert np.linalg.norm(sim.bodies[0].twist.angular) <= 1e-9


def test_solve_step_swaps_config():
    sim = Simulation(load(builders.pendulum()))
    sim, rec = solve_step(sim, DIRECT)
    assert sim.config.mode == "eliminate_direct"
    assert rec.diagnostics.rank == 5 and sim.step_index == 1
