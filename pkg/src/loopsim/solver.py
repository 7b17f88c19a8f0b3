"""Constraint system assembly and the two solve modes.

``pgs_cfm`` regularizes every bilateral row with constraint force mixing and
runs projected Gauss-Seidel, so redundant loops are solved as they are.
``eliminate_direct`` first drops linearly dependent rows (keeping the earliest
rows in assembly order and reporting the dropped ones) and then factorizes
the remaining system with an LDL^T decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import kernels
from . import quaternion as quat
from .constraints import (WORLD, ConstraintRow, Joint, StabilizationParams, ViolationReport,
                          axis_jacobian, damping_rows, joint_rows, motor_rows, orthonormal_complement)
from .dynamics import (DEFAULT_DT, ForceAccumulator, RigidBody, assemble_mass_matrix,
                       free_velocities)
from .errors import (ConfigError, MotorOnUnsupportedJoint, NonFiniteLambda, NonFiniteState,
                     SimulationError, SingularSystem, UnknownBody)

MODES = ("pgs_cfm", "eliminate_direct")


@dataclass
class SolverConfig:
    mode: str = "pgs_cfm"
    iterations: int = 64
    tolerance: float = 1e-10
    cfm_default: float = 1e-9
    beta: float = 0.2
    rank_tolerance: float = 1e-6
    dt: float = DEFAULT_DT
    gyroscopic_flag: bool = False
    warm_start: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown solver mode {self.mode!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0.0 < self.rank_tolerance < 1.0:
            raise ConfigError("rank_tolerance must lie in (0, 1)")
        if not self.dt > 0.0:
            raise ConfigError("dt must be positive")
        if self.cfm_default < 0.0:
            raise ConfigError("cfm_default must be >= 0")

    @property
    def stabilization(self) -> StabilizationParams:
        cfm = self.cfm_default if self.mode == "pgs_cfm" else 0.0
        return StabilizationParams(beta=self.beta, cfm=cfm)


@dataclass
class SolveDiagnostics:
    iterations_used: int = 0
    residual: float = 0.0
    rank: int = 0
    dropped_rows: list[tuple[str, int]] = field(default_factory=list)
    singular_flag: bool = False
    residual_history: list[float] = field(default_factory=list)


@dataclass
class ConstraintForceRecord:
    """Net joint reaction, world frame; torques are taken about the child anchor."""

    force: np.ndarray
    torque: np.ndarray
    parent_force: np.ndarray
    parent_torque: np.ndarray


@dataclass
class StepRecord:
    time: float
    forces: dict[str, ConstraintForceRecord]
    violation: ViolationReport
    kinetic: float
    potential: float
    diagnostics: SolveDiagnostics
    coordinates: dict[str, float]


# --------------------------------------------------------------------------- assembly

def stack_jacobian(rows: list[ConstraintRow], body_index: dict[str, int], n_bodies: int) -> np.ndarray:
    """Dense ``(rows, 6 * n_bodies)`` Jacobian; columns of static bodies and WORLD stay empty."""
    J = np.zeros((len(rows), 6 * n_bodies))
    for r, row in enumerate(rows):
        ia = body_index.get(row.body_a)
        ib = body_index.get(row.body_b)
        if ia is not None:
            J[r, 6 * ia:6 * ia + 6] += row.J_a
        if ib is not None:
            J[r, 6 * ib:6 * ib + 6] += row.J_b
    return J


def dynamic_index(bodies: list[RigidBody]) -> dict[str, int]:
    return {b.id: i for i, b in enumerate(bodies) if b.is_dynamic}


def inverse_mass_blocks(bodies: list[RigidBody]) -> np.ndarray:
    dyn = [b for b in bodies if b.is_dynamic]
    op = assemble_mass_matrix(dyn)
    inv = op.inverse_blocks()
    out = np.zeros((len(bodies), 6, 6))
    k = 0
    for i, b in enumerate(bodies):
        if b.is_dynamic:
            out[i] = inv[k]
            k += 1
    return out


def _system_matrix(J: np.ndarray, minv: np.ndarray, cfm_diag: np.ndarray) -> np.ndarray:
    n = J.shape[0]
    Jb = J.reshape(n, -1, 6)
    MJt = np.einsum("bij,rbj->rbi", minv, Jb).reshape(n, -1)
    A = J @ MJt.T
    A = 0.5 * (A + A.T)
    A[np.diag_indices(n)] += cfm_diag
    return A


def assemble_system(rows: list[ConstraintRow], bodies: list[RigidBody],
                    accumulators: list[ForceAccumulator], dt: float,
                    gyroscopic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """``A = J M^-1 J^T + diag(cfm / dt)`` and ``b = bias - J v_free``."""
    if not rows:
        return np.zeros((0, 0)), np.zeros(0)
    index = dynamic_index(bodies)
    J = stack_jacobian(rows, index, len(bodies))
    minv = inverse_mass_blocks(bodies)
    A = _system_matrix(J, minv, np.array([r.cfm for r in rows]) / dt)
    v_free = free_velocities(bodies, accumulators, dt, gyroscopic).ravel()
    b = np.array([r.bias for r in rows]) - J @ v_free
    return A, b


# --------------------------------------------------------------------------- PGS

@numba.njit(cache=True)
def _pgs_kernel(A, b, lo, hi, lam, iterations, tolerance, history):
    n = b.shape[0]
    used = 0
    for it in range(iterations):
        max_delta = 0.0
        for i in range(n):
            r = b[i]
            for j in range(n):
                r -= A[i, j] * lam[j]
            new = lam[i] + r / A[i, i]
            if new < lo[i]:
                new = lo[i]
            elif new > hi[i]:
                new = hi[i]
            d = abs(new - lam[i])
            if d > max_delta:
                max_delta = d
            lam[i] = new
        used = it + 1
        if history.shape[0] > it:
            res = 0.0
            for i in range(n):
                r = b[i]
                for j in range(n):
                    r -= A[i, j] * lam[j]
                res += r * r
            history[it] = math.sqrt(res)
        if not math.isfinite(max_delta):
            break
        if max_delta < tolerance:
            break
    return used


def projected_residual(A: np.ndarray, b: np.ndarray, lam: np.ndarray,
                       lo: np.ndarray, hi: np.ndarray) -> float:
    if len(b) == 0:
        return 0.0
    r = b - A @ lam
    # a row resting on a bound only violates complementarity when pushed outward
    r = np.where((lam <= lo) & (r < 0), 0.0, r)
    r = np.where((lam >= hi) & (r > 0), 0.0, r)
    return float(np.max(np.abs(r)))


def pgs_solve(A: np.ndarray, b: np.ndarray, bounds=None, config: SolverConfig | None = None,
              warm_start: np.ndarray | None = None, record_history: bool = False):
    """Projected Gauss-Seidel on ``A lambda = b`` with box bounds per row."""
    config = config or SolverConfig()
    n = len(b)
    lo, hi = _bounds(bounds, n)
    lam = np.zeros(n) if warm_start is None else np.clip(np.array(warm_start, dtype=float), lo, hi)
    if n == 0:
        return lam, SolveDiagnostics()
    A = np.ascontiguousarray(A, dtype=float)
    if np.any(np.diag(A) <= 0.0):
        raise NonFiniteLambda("PGS requires a positive diagonal")
    history = np.zeros(config.iterations if record_history else 0)
    used = _pgs_kernel(A, np.asarray(b, dtype=float), lo, hi, lam,
                       config.iterations, config.tolerance, history)
    if not np.all(np.isfinite(lam)):
        raise NonFiniteLambda("PGS produced non-finite multipliers")
    diag = SolveDiagnostics(iterations_used=int(used),
                            residual=projected_residual(A, b, lam, lo, hi),
                            rank=n, residual_history=list(history[:used]))
    return lam, diag


def _bounds(bounds, n: int) -> tuple[np.ndarray, np.ndarray]:
    if bounds is None:
        return np.full(n, -np.inf), np.full(n, np.inf)
    lo, hi = bounds
    return np.asarray(lo, dtype=float).copy(), np.asarray(hi, dtype=float).copy()


# --------------------------------------------------------------------------- direct

@numba.njit(cache=True)
def _ldl_kernel(A, rel, floor):
    n = A.shape[0]
    L = np.eye(n)
    d = np.zeros(n)
    for k in range(n):
        s = A[k, k]
        for j in range(k):
            s -= L[k, j] * L[k, j] * d[j]
        d[k] = s
        if s <= rel * A[k, k] or s <= floor:
            return L, d, k
        for i in range(k + 1, n):
            s = A[i, k]
            for j in range(k):
                s -= L[i, j] * L[k, j] * d[j]
            L[i, k] = s / d[k]
    return L, d, -1


def ldl_factor(A: np.ndarray, rank_tolerance: float):
    """LDL^T without pivoting; returns ``(L, d, failed_row)`` with ``failed_row = -1`` on success.

    A pivot is rejected when elimination leaves less than ``rank_tolerance`` of
    the row's own diagonal entry, so a stiff row cannot mask a dependent one.
    """
    scale = float(np.max(np.abs(np.diag(A)))) if len(A) else 0.0
    return _ldl_kernel(np.ascontiguousarray(A, dtype=float), rank_tolerance,
                       1e-300 + 1e-15 * scale)


def _ldl_solve(L: np.ndarray, d: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular
    y = solve_triangular(L, b, lower=True, unit_diagonal=True)
    return solve_triangular(L.T, y / d, lower=False, unit_diagonal=True)


def direct_solve(A: np.ndarray, b: np.ndarray, config: SolverConfig | None = None,
                 bounds=None, require_unique: bool = True):
    """Factorize ``A`` and solve; bounded rows are clamped and the rest re-solved."""
    config = config or SolverConfig(mode="eliminate_direct")
    n = len(b)
    if n == 0:
        return np.zeros(0), SolveDiagnostics()
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    lo, hi = _bounds(bounds, n)
    clamped = np.full(n, np.nan)
    lam = np.zeros(n)
    diag = SolveDiagnostics(rank=n)
    for _ in range(2 * n + 1):
        free = np.isnan(clamped)
        rhs = b[free] - A[np.ix_(free, ~free)] @ clamped[~free]
        L, d, bad = ldl_factor(A[np.ix_(free, free)], config.rank_tolerance)
        if bad >= 0:
            diag.singular_flag = True
            diag.rank = int(bad)
            if require_unique:
                raise SingularSystem(f"zero pivot at row {int(np.flatnonzero(free)[bad])} of {n}")
            return lam, diag
        lam[free] = _ldl_solve(L, d, rhs) if free.any() else lam[free]
        lam[~free] = clamped[~free]
        diag.iterations_used += 1
        over = free & ((lam < lo) | (lam > hi))
        if over.any():
            clamped[over] = np.clip(lam[over], lo[over], hi[over])
            continue
        # release the clamped row whose residual pulls hardest back inside its box
        r = b - A @ lam
        pull = np.where(~free & (lam <= lo), r, 0.0) - np.where(~free & (lam >= hi), r, 0.0)
        k = int(np.argmax(pull))
        if pull[k] <= 1e-12 * (1.0 + abs(b[k])):
            break
        clamped[k] = np.nan
    if not np.all(np.isfinite(lam)):
        raise NonFiniteLambda("direct solve produced non-finite multipliers")
    diag.residual = projected_residual(A, b, lam, lo, hi)
    return lam, diag


# --------------------------------------------------------------------------- redundancy

def independent_rows(J: np.ndarray, rank_tolerance: float) -> np.ndarray:
    """Boolean mask of rows kept by in-order Gram-Schmidt elimination.

    A row is dropped when its component orthogonal to all earlier kept rows is
    below ``rank_tolerance`` times the largest row norm.
    """
    n = J.shape[0]
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    scale = float(np.max(np.linalg.norm(J, axis=1)))
    if scale == 0.0:
        return keep
    return _gram_keep(J @ J.T, (rank_tolerance * scale) ** 2)


@numba.njit(cache=True)
def _gram_keep(G, threshold):
    # Cholesky of the Gram matrix that skips dependent rows; the pivot of row i
    # is its squared distance to the span of the rows kept before it
    n = G.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    L = np.zeros((n, n))
    kept = np.zeros(n, dtype=np.int64)
    k = 0
    for i in range(n):
        s = G[i, i]
        for q in range(k):
            p = kept[q]
            v = G[i, p]
            for r in range(q):
                v -= L[i, r] * L[p, r]
            v /= L[p, q]
            L[i, q] = v
            s -= v * v
        if s > threshold:
            keep[i] = True
            L[i, k] = np.sqrt(s)
            kept[k] = i
            k += 1
    return keep


def detect_redundant(rows: list[ConstraintRow], bodies: list[RigidBody],
                     config: SolverConfig | None = None) -> tuple[int, list[tuple[str, int]]]:
    config = config or SolverConfig(mode="eliminate_direct")
    J = stack_jacobian(rows, dynamic_index(bodies), len(bodies))
    keep = independent_rows(J, config.rank_tolerance)
    dropped = [(r.joint_id, r.index) for r, k in zip(rows, keep) if not k]
    return int(keep.sum()), dropped


# --------------------------------------------------------------------------- stepping

def _spin_decoupled(joint: Joint, bodies: dict[str, RigidBody], degree: dict[str, int]) -> bool:
    # a body hanging on a single undriven hinge through its centre of mass about a
    # principal axis: its spin never enters any other equation
    if joint.kind != "revolute" or joint.motor is not None or joint.damping > 0.0:
        return False
    child = bodies.get(joint.child)
    if child is None or not child.is_dynamic or degree.get(joint.child, 0) != 1:
        return False
    a = joint.anchor_child.rotation @ joint.axis
    r = joint.anchor_child.position
    if np.linalg.norm(r - (r @ a) * a) > 1e-9 * (1.0 + np.linalg.norm(r)):
        return False
    Ia = child.inertia_body @ a
    return bool(np.linalg.norm(Ia - (a @ Ia) * a) <= 1e-9 * np.linalg.norm(Ia))


def decoupled_hinges(joints: list[Joint], bodies: list[RigidBody]) -> list[Joint]:
    by_id = {b.id: b for b in bodies}
    degree: dict[str, int] = {}
    for j in joints:
        degree[j.parent] = degree.get(j.parent, 0) + 1
        degree[j.child] = degree.get(j.child, 0) + 1
    return [j for j in joints if _spin_decoupled(j, by_id, degree)]


def indeterminate_axes(joints: list[Joint], bodies: list[RigidBody], v_free: np.ndarray,
                       tolerance: float) -> list[str]:
    """Hinges whose free-axis equation is homogeneous at this step.

    The spin of a decoupled body with zero axis rate and no axis load has an
    all-zero equation row; an equation-based formulation cannot resolve it.
    """
    by_id = {b.id: b for b in bodies}
    index = {b.id: i for i, b in enumerate(bodies)}
    out = []
    for j in decoupled_hinges(joints, bodies):
        Ja, Jb = axis_jacobian(j, by_id)
        rate = Jb @ v_free[index[j.child]]
        if j.parent in index:
            rate += Ja @ v_free[index[j.parent]]
        if abs(rate) <= tolerance:
            out.append(j.id)
    return out


class Simulation:
    """A scene advancing in time under one solver configuration.

    ``scene`` needs ``bodies``, ``joints``, ``gravity`` and ``actuation``
    attributes (see :class:`loopsim.scene.SceneModel`); it is copied, never
    mutated. ``bodies`` hold the state between steps and may be edited.
    """

    def __init__(self, scene, config: SolverConfig | None = None):
        self.config = config or SolverConfig()
        self.bodies = [b.copy() for b in scene.bodies]
        self.joints = [j.copy() for j in scene.joints]
        self.gravity = np.asarray(scene.gravity, dtype=float).copy()
        self.actuation = {jid: sorted((float(t), float(v)) for t, v in sched)
                          for jid, sched in dict(scene.actuation).items()}
        self.time = 0.0
        self.step_index = 0
        self._by_id = {b.id: b for b in self.bodies}
        assemble_mass_matrix([b for b in self.bodies if b.is_dynamic])
        self._compile()
        self._warm = np.zeros(len(self.row_keys))

    @property
    def body_map(self) -> dict[str, RigidBody]:
        return self._by_id

    # ---------------------------------------------------------------- static layout
    def _compile(self) -> None:
        bodies, joints = self.bodies, self.joints
        index = {b.id: i for i, b in enumerate(bodies)}
        n, m = len(bodies), len(joints)
        self._dynamic = np.array([b.is_dynamic for b in bodies], dtype=bool)
        self._dyn_col = np.where(self._dynamic, np.arange(n), -1).astype(np.int64)
        self._mass = np.array([b.mass if b.is_dynamic else 1.0 for b in bodies])
        self._inv_ib = np.array([np.linalg.inv(b.inertia_body) if b.is_dynamic else np.zeros((3, 3))
                                 for b in bodies]).reshape(n, 3, 3)
        self._ib = np.array([b.inertia_body for b in bodies]).reshape(n, 3, 3)
        self._kind = np.array([kernels.KIND_CODE[j.kind] for j in joints], dtype=np.int64)
        self._parent = np.array([index.get(j.parent, -1) for j in joints], dtype=np.int64)
        self._child = np.array([index.get(j.child, -1) for j in joints], dtype=np.int64)
        for j in joints:
            for end in (j.parent, j.child):
                if end != WORLD and end not in index:
                    raise UnknownBody(f"joint {j.id!r} references unknown body {end!r}")
        self._ap_pos = np.array([j.anchor_parent.position for j in joints]).reshape(m, 3)
        self._ap_rot = np.array([j.anchor_parent.rotation for j in joints]).reshape(m, 3, 3)
        self._ac_pos = np.array([j.anchor_child.position for j in joints]).reshape(m, 3)
        self._ac_rot = np.array([j.anchor_child.rotation for j in joints]).reshape(m, 3, 3)
        self._axis = np.array([j.axis for j in joints]).reshape(m, 3)
        comp = [orthonormal_complement(j.axis) for j in joints]
        self._t1 = np.array([c[0] for c in comp]).reshape(m, 3)
        self._t2 = np.array([c[1] for c in comp]).reshape(m, 3)
        counts = kernels.ROWS_BY_CODE[self._kind] if m else np.zeros(0, dtype=np.int64)
        self._row_offset = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64) if m else np.zeros(0, np.int64)
        self._n_joint_rows = int(counts.sum()) if m else 0

        # final row order: per joint its geometric rows, then motor, then damping
        order, keys, roles, starts = [], [], [], []
        for jn, j in enumerate(joints):
            starts.append(len(order))
            for i in range(int(counts[jn])):
                order.append(("J", int(self._row_offset[jn]) + i))
                keys.append((j.id, i))
                roles.append("joint")
            extra = int(counts[jn])
            if j.motor is not None:
                if j.kind not in ("revolute", "prismatic"):
                    raise MotorOnUnsupportedJoint(f"motor on {j.kind} joint {j.id!r}")
                order.append(("M", jn))
                keys.append((j.id, extra))
                roles.append("motor")
                extra += 1
            if j.damping > 0.0:
                order.append(("D", jn))
                keys.append((j.id, extra))
                roles.append("damping")
        self._order = order
        self.row_keys = keys
        self.row_roles = roles
        self._joint_starts = np.array(starts, dtype=np.int64)
        self._decoupled = decoupled_hinges(joints, self.bodies)
        self._cache = None

    # ---------------------------------------------------------------- state packing
    def _pack(self):
        pos = np.array([b.pose.position for b in self.bodies]).reshape(-1, 3)
        quats = np.array([b.pose.orientation for b in self.bodies]).reshape(-1, 4)
        vel = np.array([np.concatenate((b.twist.linear, b.twist.angular)) for b in self.bodies]).reshape(-1, 6)
        return pos, quats, vel

    def _evaluate(self, pos, quats):
        if self._cache is not None:
            cpos, cq, out = self._cache
            if np.array_equal(cpos, pos) and np.array_equal(cq, quats):
                return out
        rot = kernels.rotations(quats)
        J, C, AX, err, coord = kernels.joint_kernel(
            self._kind, self._parent, self._child, self._ap_pos, self._ap_rot, self._ac_pos,
            self._ac_rot, self._axis, self._t1, self._t2, self._row_offset, self._n_joint_rows,
            pos, rot, self._dyn_col, len(self.bodies))
        out = (rot, J, C, AX, err, coord)
        self._cache = (pos.copy(), quats.copy(), out)
        return out

    def _apply_actuation(self) -> None:
        for j in self.joints:
            sched = self.actuation.get(j.id)
            if sched and j.motor is not None:
                ts, vs = zip(*sched)
                j.motor.target = float(np.interp(self.time, ts, vs))

    def build_rows(self) -> list[ConstraintRow]:
        """Row objects at the current state, in assembly order (Python reference path)."""
        dt = self.config.dt
        params = self.config.stabilization
        rows: list[ConstraintRow] = []
        for j in self.joints:
            rows += joint_rows(j, self._by_id, dt, params)
            rows += motor_rows(j, self._by_id, dt)
            rows += damping_rows(j, self._by_id, dt)
        return rows

    def assemble(self):
        """``(J, bias, cfm, lo, hi)`` for the current state in assembly order."""
        cfg = self.config
        dt = cfg.dt
        pos, quats, vel = self._pack()
        rot, Jj, C, AX, err, coord = self._evaluate(pos, quats)
        params = cfg.stabilization
        gain = params.beta / dt
        nrows = len(self._order)
        J = np.empty((nrows, Jj.shape[1]))
        bias = np.empty(nrows)
        cfm = np.empty(nrows)
        lo = np.full(nrows, -np.inf)
        hi = np.full(nrows, np.inf)
        for r, (src, k) in enumerate(self._order):
            if src == "J":
                J[r] = Jj[k]
                bias[r] = -gain * C[k]
                cfm[r] = params.cfm
                continue
            j = self.joints[k]
            J[r] = AX[k]
            if src == "M":
                m = j.motor
                if m.mode == "velocity_drive":
                    bias[r] = m.target
                else:
                    kp, kd = m.gains
                    rate = float(AX[k] @ vel.ravel())
                    bias[r] = rate + dt * (kp * (m.target - coord[k]) - kd * rate)
                cfm[r] = 0.0
                lo[r], hi[r] = -m.max_force * dt, m.max_force * dt
            else:
                bias[r] = 0.0
                cfm[r] = 1.0 / j.damping
        return J, bias, cfm, lo, hi

    # ---------------------------------------------------------------- stepping
    def step(self) -> StepRecord:
        try:
            return self._step()
        except SimulationError as exc:
            if exc.step is None:
                exc.step = self.step_index
            raise

    def _inverse_mass(self, rot) -> np.ndarray:
        n = len(self.bodies)
        minv = np.zeros((n, 6, 6))
        inv_iw = np.einsum("nij,njk,nlk->nil", rot, self._inv_ib, rot)
        for i in range(n):
            if self._dynamic[i]:
                minv[i, 0, 0] = minv[i, 1, 1] = minv[i, 2, 2] = 1.0 / self._mass[i]
                minv[i, 3:, 3:] = inv_iw[i]
        return minv

    def _free_velocity(self, vel) -> np.ndarray:
        v = vel.copy()
        dt = self.config.dt
        v[self._dynamic, :3] += dt * self.gravity
        v[~self._dynamic] = 0.0
        if self.config.gyroscopic_flag:
            from .dynamics import _gyroscopic_implicit
            for i, b in enumerate(self.bodies):
                if self._dynamic[i]:
                    v[i, 3:] = _gyroscopic_implicit(b, v[i, 3:], dt)
        return v

    def _step(self) -> StepRecord:
        cfg = self.config
        dt = cfg.dt
        self._apply_actuation()
        pos, quats, vel = self._pack()
        rot = self._evaluate(pos, quats)[0]
        J, bias, cfm, lo, hi = self.assemble()
        minv = self._inverse_mass(rot)
        v_free = self._free_velocity(vel)
        b = bias - J @ v_free.ravel()
        lam = np.zeros(len(b))

        if cfg.mode == "pgs_cfm":
            A = _system_matrix(J, minv, cfm / dt)
            warm = np.clip(self._warm, lo, hi) if cfg.warm_start else None
            lam, diag = pgs_solve(A, b, (lo, hi), cfg, warm_start=warm)
        else:
            keep = independent_rows(J, cfg.rank_tolerance)
            dropped = [key for key, k in zip(self.row_keys, keep) if not k]
            stuck = []
            for j in self._decoupled:
                jn = self.joints.index(j)
                Jax = self._evaluate(pos, quats)[3][jn]
                if abs(Jax @ v_free.ravel()) <= cfg.rank_tolerance:
                    stuck.append(j.id)
            if stuck:
                raise SingularSystem(
                    f"free axis of joint(s) {', '.join(stuck)} has a homogeneous equation")
            A = _system_matrix(J[keep], minv, cfm[keep] / dt)
            lam_k, diag = direct_solve(A, b[keep], cfg, (lo[keep], hi[keep]))
            lam[keep] = lam_k
            diag.rank = int(keep.sum())
            diag.dropped_rows = dropped

        self._warm = lam.copy()
        imp = (J.T @ lam).reshape(-1, 6)
        forces = self._force_records(J, lam, pos, quats, rot, dt)

        v_new = v_free + np.einsum("nij,nj->ni", minv, imp)
        if not np.all(np.isfinite(v_new)):
            raise NonFiniteState("non-finite velocity after integration")
        v_new[~self._dynamic] = vel[~self._dynamic]
        new_pos = pos + dt * np.where(self._dynamic[:, None], v_new[:, :3], 0.0)
        new_q = np.where(self._dynamic[:, None], kernels.exp_update(quats, v_new[:, 3:], dt), quats)
        if not (np.all(np.isfinite(new_pos)) and np.all(np.isfinite(new_q))):
            raise NonFiniteState("non-finite pose after integration")
        for i, body in enumerate(self.bodies):
            if self._dynamic[i]:
                body.pose.position = new_pos[i].copy()
                body.pose.orientation = new_q[i].copy()
                body.twist.linear = v_new[i, :3].copy()
                body.twist.angular = v_new[i, 3:].copy()

        self.step_index += 1
        self.time = self.step_index * dt
        rot2, _, _, _, err, coord = self._evaluate(new_pos, new_q)
        ids = [j.id for j in self.joints]
        violation = ViolationReport(dict(zip(ids, err[:, 0].tolist())), dict(zip(ids, err[:, 1].tolist())))
        kinetic, potential = self._energy(new_pos, v_new, rot2)
        return StepRecord(
            time=self.time, forces=forces, violation=violation, kinetic=kinetic,
            potential=potential, diagnostics=diag,
            coordinates={j.id: float(coord[k]) for k, j in enumerate(self.joints)
                         if j.kind in ("revolute", "prismatic")})

    def _energy(self, pos, vel, rot) -> tuple[float, float]:
        d = self._dynamic
        iw = np.einsum("nij,njk,nlk->nil", rot[d], self._ib[d], rot[d])
        w = vel[d, 3:]
        kinetic = 0.5 * float(np.sum(self._mass[d] * np.sum(vel[d, :3] ** 2, axis=1)))
        kinetic += 0.5 * float(np.einsum("ni,nij,nj->", w, iw, w))
        potential = -float(np.sum(self._mass[d] * (pos[d] @ self.gravity)))
        return kinetic, potential

    def _force_records(self, J, lam, pos, quats, rot, dt) -> dict[str, ConstraintForceRecord]:
        # every row acts equal and opposite about the child anchor, so one dynamic
        # side is enough to recover both wrenches
        out = {}
        if not self.joints:
            return out
        if len(lam):
            G = np.add.reduceat(lam[:, None] * J, self._joint_starts, axis=0) / dt
        else:
            G = np.zeros((len(self.joints), J.shape[1]))
        for k, j in enumerate(self.joints):
            p, c = self._parent[k], self._child[k]
            c_dyn = c >= 0 and self._dynamic[c]
            p_dyn = p >= 0 and self._dynamic[p]
            x_c = pos[c] if c >= 0 else np.zeros(3)
            x_p = pos[p] if p >= 0 else np.zeros(3)
            anchor = x_c + (rot[c] @ self._ac_pos[k] if c >= 0 else self._ac_pos[k])
            if c_dyn:
                fc = G[k, 6 * c:6 * c + 3]
                tc = G[k, 6 * c + 3:6 * c + 6] + quat.cross(x_c - anchor, fc)
            elif p_dyn:
                fp = G[k, 6 * p:6 * p + 3]
                fc = -fp
                tc = -(G[k, 6 * p + 3:6 * p + 6] + quat.cross(x_p - anchor, fp))
            else:
                fc, tc = np.zeros(3), np.zeros(3)
            out[j.id] = ConstraintForceRecord(force=fc.copy(), torque=tc.copy(),
                                              parent_force=-fc, parent_torque=-tc)
        return out

    def run(self, duration: float, callback=None) -> list[StepRecord]:
        n = int(round(duration / self.config.dt))
        records = []
        for _ in range(n):
            rec = self.step()
            records.append(rec)
            if callback is not None:
                callback(self, rec)
        return records


def solve_step(sim: Simulation, config: SolverConfig | None = None) -> tuple[Simulation, StepRecord]:
    """Advance ``sim`` by one step; ``config`` optionally replaces its configuration."""
    if config is not None:
        sim.config = config
    record = sim.step()
    return sim, record
