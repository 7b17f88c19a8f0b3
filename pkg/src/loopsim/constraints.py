"""Joints and the velocity-level constraint rows they generate.

Every row is built from one of three position-level error functions whose time
derivative is exactly linear in the body twists:

* point rows      ``C = e . (p_child - p_parent)`` with a fixed world direction ``e``
* dot rows        ``C = u . w`` with ``u`` fixed in the child and ``w`` in the parent
* transverse rows ``C = t . (p_child - p_parent)`` with ``t`` fixed in the parent

so the Jacobians match finite differences of ``C`` in any configuration, not
only near an assembled pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import quaternion as quat
from .dynamics import Pose, RigidBody
from .errors import MotorOnUnsupportedJoint, SchemaError, UnknownBody

WORLD = "world"

JOINT_KINDS = ("revolute", "prismatic", "spherical", "fixed")
JOINT_DOF = {"revolute": 1, "prismatic": 1, "spherical": 3, "fixed": 0}
ROW_COUNT = {kind: 6 - dof for kind, dof in JOINT_DOF.items()}

_EYE = np.eye(3)
_ZERO3 = np.zeros(3)


@dataclass
class MotorParams:
    mode: str = "velocity_drive"
    target: float = 0.0
    max_force: float = math.inf
    gains: tuple[float, float] = (100.0, 20.0)

    def __post_init__(self):
        if self.mode not in ("velocity_drive", "position_drive"):
            raise SchemaError(f"unknown motor mode {self.mode!r}", "motor.mode")
        if self.max_force < 0:
            raise SchemaError("max_force must be >= 0", "motor.max_force")
        if self.mode == "position_drive" and min(self.gains) <= 0:
            raise SchemaError("position drive gains must be positive", "motor.gains")


@dataclass
class Joint:
    id: str
    kind: str
    parent: str
    child: str
    anchor_parent: Pose = field(default_factory=Pose)
    anchor_child: Pose = field(default_factory=Pose)
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    motor: MotorParams | None = None
    damping: float = 0.0

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise SchemaError(f"unknown joint kind {self.kind!r}", "kind")
        if self.parent == self.child:
            raise SchemaError("parent and child must differ", "child")
        axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise SchemaError("joint axis must be non-zero", "axis")
        self.axis = axis / n
        if self.damping < 0:
            raise SchemaError("damping must be >= 0", "damping")

    @property
    def dof(self) -> int:
        return JOINT_DOF[self.kind]

    def copy(self) -> "Joint":
        motor = None if self.motor is None else MotorParams(
            self.motor.mode, self.motor.target, self.motor.max_force, tuple(self.motor.gains))
        return Joint(self.id, self.kind, self.parent, self.child, self.anchor_parent.copy(),
                     self.anchor_child.copy(), self.axis.copy(), motor, self.damping)


@dataclass
class StabilizationParams:
    beta: float = 0.2
    cfm: float = 1e-9


@dataclass
class ConstraintRow:
    joint_id: str
    index: int
    body_a: str
    body_b: str
    J_a: np.ndarray
    J_b: np.ndarray
    bias: float = 0.0
    cfm: float = 0.0
    lo: float = -math.inf
    hi: float = math.inf
    lam: float = 0.0
    role: str = "joint"  # joint | motor | damping
    error: float = 0.0

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lo) or math.isfinite(self.hi)


@dataclass
class ViolationReport:
    position_error: dict[str, float]
    angle_error: dict[str, float]

    @property
    def max_position(self) -> float:
        return max(self.position_error.values(), default=0.0)

    @property
    def rms_position(self) -> float:
        v = list(self.position_error.values())
        return float(np.sqrt(np.mean(np.square(v)))) if v else 0.0

    @property
    def max_angle(self) -> float:
        return max(self.angle_error.values(), default=0.0)

    @property
    def rms_angle(self) -> float:
        v = list(self.angle_error.values())
        return float(np.sqrt(np.mean(np.square(v)))) if v else 0.0


def orthonormal_complement(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``axis`` to a right-handed orthonormal basis.

    Starts from the coordinate axis least aligned with ``axis`` (lowest index
    on ties), so the result is reproducible bit for bit.
    """
    k = int(np.argmin(np.abs(axis)))
    e = _EYE[k]
    t1 = e - (e @ axis) * axis
    t1 /= np.linalg.norm(t1)
    return t1, quat.cross(axis, t1)


class JointGeometry:
    """World-frame quantities of one joint evaluated at the current poses."""

    __slots__ = ("x_p", "x_c", "frame_p", "frame_c", "R_p", "R_c", "p_pa", "p_ca",
                 "r_p", "r_c", "axis_p", "axis_c")

    def __init__(self, joint: Joint, bodies: dict[str, RigidBody]):
        parent = _lookup(bodies, joint.parent)
        child = _lookup(bodies, joint.child)
        pose_p = parent.pose if parent is not None else Pose()
        pose_c = child.pose if child is not None else Pose()
        self.x_p = pose_p.position
        self.x_c = pose_c.position
        self.frame_p = pose_p.compose(joint.anchor_parent)
        self.frame_c = pose_c.compose(joint.anchor_child)
        self.R_p = self.frame_p.rotation
        self.R_c = self.frame_c.rotation
        self.p_pa = self.frame_p.position
        self.p_ca = self.frame_c.position
        self.r_p = self.p_pa - self.x_p
        self.r_c = self.p_ca - self.x_c
        self.axis_p = self.R_p @ joint.axis
        self.axis_c = self.R_c @ joint.axis

    @property
    def gap(self) -> np.ndarray:
        return self.p_ca - self.p_pa


def _lookup(bodies: dict[str, RigidBody], body_id: str) -> RigidBody | None:
    if body_id == WORLD:
        return None
    try:
        return bodies[body_id]
    except KeyError:
        raise UnknownBody(f"joint references unknown body {body_id!r}") from None


def _point_row(g: JointGeometry, e: np.ndarray):
    return (np.concatenate((-e, -quat.cross(g.r_p, e))),
            np.concatenate((e, quat.cross(g.r_c, e))),
            float(e @ g.gap))


def _dot_row(u: np.ndarray, w: np.ndarray):
    n = quat.cross(u, w)
    return (np.concatenate((_ZERO3, -n)), np.concatenate((_ZERO3, n)), float(u @ w))


def _transverse_row(g: JointGeometry, t: np.ndarray):
    return (np.concatenate((-t, quat.cross(t, g.p_ca - g.x_p))),
            np.concatenate((t, quat.cross(g.r_c, t))),
            float(t @ g.gap))


def _orientation_rows(g: JointGeometry):
    P, Q = g.R_p, g.R_c
    return [_dot_row(Q[:, 1], P[:, 2]), _dot_row(Q[:, 2], P[:, 0]), _dot_row(Q[:, 0], P[:, 1])]


def constraint_terms(joint: Joint, bodies: dict[str, RigidBody],
                     geometry: JointGeometry | None = None) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """``(J_parent, J_child, C)`` for every joint row, in row order."""
    g = geometry or JointGeometry(joint, bodies)
    kind = joint.kind
    if kind == "revolute":
        t1, t2 = orthonormal_complement(joint.axis)
        rows = [_point_row(g, e) for e in _EYE]
        rows += [_dot_row(g.axis_c, g.R_p @ t1), _dot_row(g.axis_c, g.R_p @ t2)]
    elif kind == "prismatic":
        t1, t2 = orthonormal_complement(joint.axis)
        rows = _orientation_rows(g)
        rows += [_transverse_row(g, g.R_p @ t1), _transverse_row(g, g.R_p @ t2)]
    elif kind == "spherical":
        rows = [_point_row(g, e) for e in _EYE]
    else:
        rows = [_point_row(g, e) for e in _EYE] + _orientation_rows(g)
    return rows


def joint_rows(joint: Joint, bodies: dict[str, RigidBody], dt: float,
               params: StabilizationParams | None = None,
               geometry: JointGeometry | None = None) -> list[ConstraintRow]:
    params = params or StabilizationParams()
    gain = params.beta / dt
    return [ConstraintRow(joint.id, i, joint.parent, joint.child, Ja, Jb,
                          bias=-gain * C, cfm=params.cfm, error=C)
            for i, (Ja, Jb, C) in enumerate(constraint_terms(joint, bodies, geometry))]


def axis_jacobian(joint: Joint, bodies: dict[str, RigidBody],
                  geometry: JointGeometry | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Jacobian blocks of the relative rate along the joint's free axis."""
    if joint.kind not in ("revolute", "prismatic"):
        raise MotorOnUnsupportedJoint(f"joint {joint.id!r} of kind {joint.kind} has no single free axis")
    g = geometry or JointGeometry(joint, bodies)
    a = g.axis_p
    if joint.kind == "revolute":
        return np.concatenate((_ZERO3, -a)), np.concatenate((_ZERO3, a))
    return _transverse_row(g, a)[:2]


def joint_coordinate(joint: Joint, bodies: dict[str, RigidBody],
                     geometry: JointGeometry | None = None) -> float:
    """Joint angle (rad) or slide (m) along the free axis."""
    g = geometry or JointGeometry(joint, bodies)
    if joint.kind == "revolute":
        t1, _ = orthonormal_complement(joint.axis)
        tp, tc = g.R_p @ t1, g.R_c @ t1
        return float(math.atan2(g.axis_p @ quat.cross(tp, tc), tp @ tc))
    if joint.kind == "prismatic":
        return float(g.axis_p @ g.gap)
    raise MotorOnUnsupportedJoint(f"joint {joint.id!r} has no scalar coordinate")


def _twist(bodies: dict[str, RigidBody], body_id: str) -> np.ndarray:
    b = _lookup(bodies, body_id)
    return np.zeros(6) if b is None else b.twist.as_vector()


def joint_rate(joint: Joint, bodies: dict[str, RigidBody],
               geometry: JointGeometry | None = None) -> float:
    Ja, Jb = axis_jacobian(joint, bodies, geometry)
    return float(Ja @ _twist(bodies, joint.parent) + Jb @ _twist(bodies, joint.child))


def motor_rows(joint: Joint, bodies: dict[str, RigidBody], dt: float,
               geometry: JointGeometry | None = None) -> list[ConstraintRow]:
    if joint.motor is None:
        return []
    if joint.kind not in ("revolute", "prismatic"):
        raise MotorOnUnsupportedJoint(f"motor on {joint.kind} joint {joint.id!r}")
    m = joint.motor
    Ja, Jb = axis_jacobian(joint, bodies, geometry)
    if m.mode == "velocity_drive":
        target = m.target
    else:
        kp, kd = m.gains
        rate = joint_rate(joint, bodies, geometry)
        err = m.target - joint_coordinate(joint, bodies, geometry)
        target = rate + dt * (kp * err - kd * rate)
    bound = m.max_force * dt
    return [ConstraintRow(joint.id, ROW_COUNT[joint.kind], joint.parent, joint.child, Ja, Jb,
                          bias=target, cfm=0.0, lo=-bound, hi=bound, role="motor")]


def damping_rows(joint: Joint, bodies: dict[str, RigidBody], dt: float,
                 geometry: JointGeometry | None = None) -> list[ConstraintRow]:
    """Viscous joint damping as a regularized zero-rate row.

    With ``cfm = 1/d`` (divided by ``dt`` at assembly) the row impulse is
    ``-d * dt * rate_new``, i.e. an implicit viscous force ``-d * rate``.
    """
    if not joint.damping > 0.0:
        return []
    Ja, Jb = axis_jacobian(joint, bodies, geometry)
    index = ROW_COUNT[joint.kind] + (joint.motor is not None)
    return [ConstraintRow(joint.id, index, joint.parent, joint.child, Ja, Jb,
                          bias=0.0, cfm=1.0 / joint.damping, role="damping")]


def joint_errors(joint: Joint, bodies: dict[str, RigidBody],
                 geometry: JointGeometry | None = None) -> tuple[float, float]:
    """``(position_error, angle_error)`` of one joint, both >= 0."""
    g = geometry or JointGeometry(joint, bodies)
    gap = g.gap
    if joint.kind == "prismatic":
        a = g.axis_p
        pos = float(np.linalg.norm(gap - (a @ gap) * a))
    else:
        pos = float(np.linalg.norm(gap))
    if joint.kind == "revolute":
        ang = float(math.atan2(np.linalg.norm(quat.cross(g.axis_p, g.axis_c)), g.axis_p @ g.axis_c))
    elif joint.kind in ("prismatic", "fixed"):
        rel = quat.multiply(g.frame_c.orientation, quat.conjugate(g.frame_p.orientation))
        ang = quat.rotation_angle(rel)
    else:
        ang = 0.0
    return pos, ang


def measure_violation(bodies: dict[str, RigidBody], joints: list[Joint],
                      geometries: dict[str, JointGeometry] | None = None) -> ViolationReport:
    """Recompute position-level joint errors from the current poses; pure observer."""
    pos, ang = {}, {}
    for j in joints:
        g = geometries.get(j.id) if geometries else None
        pos[j.id], ang[j.id] = joint_errors(j, bodies, g)
    return ViolationReport(pos, ang)
