"""Rigid bodies in maximal coordinates and their semi-implicit integration.

Every dynamic body carries all six degrees of freedom. The equations of
motion are ``M a = f_ext + f_c``; constraint forces enter the integrator as
impulses ``J^T lambda`` computed by :mod:`loopsim.solver`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quaternion as quat
from .errors import NonFiniteState, ZeroMassBody

DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.81])
DEFAULT_DT = 1e-3


@dataclass
class Pose:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).copy()
        self.orientation = quat.normalize(np.asarray(self.orientation, dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        return quat.to_matrix(self.orientation)

    def transform_point(self, p) -> np.ndarray:
        return self.position + quat.rotate(self.orientation, np.asarray(p, dtype=float))

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: ``other`` expressed in this frame, mapped to the parent."""
        return Pose(self.transform_point(other.position),
                    quat.multiply(self.orientation, other.orientation))

    def inverse(self) -> "Pose":
        qi = quat.conjugate(self.orientation)
        return Pose(-quat.rotate(qi, self.position), qi)

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.orientation.copy())


@dataclass
class Twist:
    """Linear and angular velocity, both in the world frame."""

    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float).copy()
        self.angular = np.asarray(self.angular, dtype=float).copy()

    def as_vector(self) -> np.ndarray:
        return np.concatenate((self.linear, self.angular))

    def copy(self) -> "Twist":
        return Twist(self.linear.copy(), self.angular.copy())


@dataclass
class RigidBody:
    id: str
    mass: float = 1.0
    inertia_body: np.ndarray = field(default_factory=lambda: np.eye(3))
    pose: Pose = field(default_factory=Pose)
    twist: Twist = field(default_factory=Twist)
    static_flag: bool = False

    def __post_init__(self):
        self.inertia_body = np.asarray(self.inertia_body, dtype=float).reshape(3, 3).copy()

    @property
    def is_dynamic(self) -> bool:
        return not self.static_flag

    def copy(self) -> "RigidBody":
        return RigidBody(self.id, self.mass, self.inertia_body.copy(),
                         self.pose.copy(), self.twist.copy(), self.static_flag)


@dataclass
class ForceAccumulator:
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def reset(self) -> None:
        self.force[:] = 0.0
        self.torque[:] = 0.0


def world_inertia(body: RigidBody) -> np.ndarray:
    R = body.pose.rotation
    return R @ body.inertia_body @ R.T


class MassOperator:
    """Block-diagonal system mass matrix, one 6x6 block per dynamic body.

    Blocks are kept separate; :meth:`apply_inverse` inverts per block and the
    full ``6n x 6n`` matrix is only built by :meth:`to_dense` for inspection.
    """

    def __init__(self, masses: np.ndarray, inertias: np.ndarray):
        self.masses = np.asarray(masses, dtype=float)
        self.inertias = np.asarray(inertias, dtype=float).reshape(-1, 3, 3)
        self.inv_inertias = np.linalg.inv(self.inertias) if len(self.masses) else self.inertias.copy()

    @property
    def n_bodies(self) -> int:
        return len(self.masses)

    def block(self, i: int) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = self.masses[i] * np.eye(3)
        out[3:, 3:] = self.inertias[i]
        return out

    def inverse_blocks(self) -> np.ndarray:
        out = np.zeros((self.n_bodies, 6, 6))
        for i in range(self.n_bodies):
            out[i, :3, :3] = np.eye(3) / self.masses[i]
            out[i, 3:, 3:] = self.inv_inertias[i]
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 6)
        lin = self.masses[:, None] * x[:, :3]
        ang = np.einsum("nij,nj->ni", self.inertias, x[:, 3:])
        return np.hstack((lin, ang)).ravel()

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 6)
        lin = x[:, :3] / self.masses[:, None]
        ang = np.einsum("nij,nj->ni", self.inv_inertias, x[:, 3:])
        return np.hstack((lin, ang)).ravel()

    def to_dense(self) -> np.ndarray:
        n = self.n_bodies
        out = np.zeros((6 * n, 6 * n))
        for i in range(n):
            out[6 * i:6 * i + 6, 6 * i:6 * i + 6] = self.block(i)
        return out


def assemble_mass_matrix(bodies: list[RigidBody]) -> MassOperator:
    for b in bodies:
        if b.is_dynamic and not b.mass > 0.0:
            raise ZeroMassBody(f"body {b.id!r} has non-positive mass {b.mass}")
    return MassOperator(np.array([b.mass for b in bodies]),
                        np.array([world_inertia(b) for b in bodies]).reshape(-1, 3, 3))


def _gyroscopic_implicit(body: RigidBody, omega: np.ndarray, dt: float) -> np.ndarray:
    # one Newton step on I(w' - w) + dt w' x I w' = 0, solved in the body frame
    R = body.pose.rotation
    I = body.inertia_body
    wb = R.T @ omega
    Iw = I @ wb
    f = dt * quat.cross(wb, Iw)
    skew = lambda v: np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    jac = I + dt * (skew(wb) @ I - skew(Iw))
    wb = wb - np.linalg.solve(jac, f)
    return R @ wb


def free_velocities(bodies: list[RigidBody], accumulators: list[ForceAccumulator],
                    dt: float, gyroscopic: bool = False) -> np.ndarray:
    """Velocities after external forces only, stacked as ``(n, 6)``."""
    out = np.zeros((len(bodies), 6))
    for i, (b, acc) in enumerate(zip(bodies, accumulators)):
        if not b.is_dynamic:
            continue
        out[i, :3] = b.twist.linear + dt * acc.force / b.mass
        Iw = world_inertia(b)
        w = b.twist.angular + dt * np.linalg.solve(Iw, acc.torque)
        if gyroscopic:
            w = _gyroscopic_implicit(b, w, dt)
        out[i, 3:] = w
    return out


def integrate_semi_implicit(bodies: list[RigidBody], accumulators: list[ForceAccumulator],
                            constraint_impulses: np.ndarray | None, dt: float,
                            gyroscopic: bool = False) -> list[RigidBody]:
    """Advance bodies in place by one step and return them.

    Velocities are updated first; positions then move with the new velocity and
    orientations with the exact exponential map of ``dt * omega``.
    """
    v = free_velocities(bodies, accumulators, dt, gyroscopic)
    if constraint_impulses is not None:
        imp = np.asarray(constraint_impulses, dtype=float).reshape(-1, 6)
        for i, b in enumerate(bodies):
            if b.is_dynamic and imp[i].any():
                v[i, :3] += imp[i, :3] / b.mass
                v[i, 3:] += np.linalg.solve(world_inertia(b), imp[i, 3:])
    if not np.all(np.isfinite(v)):
        raise NonFiniteState("non-finite velocity after integration")
    for i, b in enumerate(bodies):
        if not b.is_dynamic:
            continue
        b.twist.linear = v[i, :3].copy()
        b.twist.angular = v[i, 3:].copy()
        b.pose.position = b.pose.position + dt * b.twist.linear
        b.pose.orientation = quat.normalize(
            quat.multiply(quat.exp_map(dt * b.twist.angular), b.pose.orientation))
        if not (np.all(np.isfinite(b.pose.position)) and np.all(np.isfinite(b.pose.orientation))):
            raise NonFiniteState(f"non-finite pose for body {b.id!r}")
    return bodies


def system_energy(bodies: list[RigidBody], gravity=DEFAULT_GRAVITY) -> tuple[float, float]:
    g = np.asarray(gravity, dtype=float)
    kinetic = 0.0
    potential = 0.0
    for b in bodies:
        if not b.is_dynamic:
            continue
        v, w = b.twist.linear, b.twist.angular
        kinetic += 0.5 * b.mass * float(v @ v) + 0.5 * float(w @ world_inertia(b) @ w)
        potential -= b.mass * float(g @ b.pose.position)
    return kinetic, potential
