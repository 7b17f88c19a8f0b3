"""Parametric generators for the benchmark scenes.

Every generator returns a chained-frame document; convert it with
:func:`loopsim.scene.chained_to_world` for world-frame loading. All
mechanisms are planar in the x-z plane with hinge axes along +y, gravity
along -z.
"""

from __future__ import annotations

import math

import numpy as np

from . import quaternion as quat
from .constraints import WORLD
from .dynamics import Pose
from .schema import VERSION

Y_AXIS = [0.0, 1.0, 0.0]


def planar_orientation(angle: float) -> np.ndarray:
    """Orientation whose local +x points along ``(cos a, 0, sin a)``."""
    return quat.from_axis_angle(Y_AXIS, -angle)


def rod_inertia(mass: float, length: float, width: float = 0.05) -> list[float]:
    """Box inertia about the centre, long side along local x."""
    w2 = width * width
    return [mass * 2 * w2 / 12, mass * (length ** 2 + w2) / 12, mass * (length ** 2 + w2) / 12]


def cylinder_inertia(mass: float, radius: float, length: float) -> list[float]:
    """Solid cylinder with its axis along local y."""
    transverse = mass * (3 * radius ** 2 + length ** 2) / 12
    return [transverse, 0.5 * mass * radius ** 2, transverse]


class ChainBuilder:
    """Accumulates a chained-frame document while tracking world frame poses."""

    def __init__(self, name: str, gravity=(0.0, 0.0, -9.81)):
        self.doc = {"version": VERSION, "convention": "chained_frame", "name": name,
                    "gravity": list(gravity), "world_frames": {}, "bodies": [], "closures": []}
        self.frames: dict[tuple[str, str], Pose] = {(WORLD, "origin"): Pose()}
        self.angles: dict[tuple[str, str], float] = {(WORLD, "origin"): 0.0}

    def world_frame(self, name: str, position) -> None:
        self.doc["world_frames"][name] = {"position": [float(x) for x in position],
                                          "orientation": [1.0, 0.0, 0.0, 0.0]}
        self.frames[(WORLD, name)] = Pose(position)
        self.angles[(WORLD, name)] = 0.0

    def point(self, body: str, frame: str) -> np.ndarray:
        return self.frames[(body, frame)].position.copy()

    def link(self, id: str, attach: tuple[str, str], angle: float, length: float, mass: float,
             joint: dict | None = None, frames: dict | None = None, com=None,
             inertia=None, width: float = 0.05, angular_velocity=None) -> None:
        rel = angle - self.angles[attach]
        entry = {"id": id, "attach": {"body": attach[0], "frame": attach[1]},
                 "frame_a": {"position": [0.0, 0.0, 0.0],
                             "orientation": [float(x) for x in planar_orientation(rel)]},
                 "r_ab": [float(length), 0.0, 0.0], "mass": float(mass),
                 "inertia": inertia if inertia is not None else rod_inertia(mass, max(length, width), width)}
        if com is not None:
            entry["com"] = [float(x) for x in com]
        if frames:
            entry["frames"] = {k: [float(x) for x in v] for k, v in frames.items()}
        if joint is not None:
            entry["joint"] = {"axis": Y_AXIS, **joint}
        if angular_velocity is not None:
            entry["angular_velocity"] = [float(x) for x in angular_velocity]
        self.doc["bodies"].append(entry)
        frame_a = self.frames[attach].compose(Pose([0, 0, 0], planar_orientation(rel)))
        self.frames[(id, "a")] = frame_a
        self.frames[(id, "b")] = Pose(frame_a.transform_point([length, 0, 0]), frame_a.orientation)
        for k, v in (frames or {}).items():
            self.frames[(id, k)] = Pose(frame_a.transform_point(v), frame_a.orientation)
        for k in ["a", "b"] + list(frames or {}):
            self.angles[(id, k)] = angle

    def closure(self, id: str, parent: tuple[str, str], child: tuple[str, str],
                kind: str = "revolute", axis=Y_AXIS, **extra) -> None:
        self.doc["closures"].append({"id": id, "kind": kind, "axis": list(axis),
                                     "parent": {"body": parent[0], "frame": parent[1]},
                                     "child": {"body": child[0], "frame": child[1]}, **extra})

    def actuate(self, joint: str, schedule) -> None:
        self.doc.setdefault("actuation", []).append(
            {"joint": joint, "schedule": [[float(t), float(v)] for t, v in schedule]})


def _direction(p, q) -> tuple[float, float]:
    d = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
    return math.atan2(d[2], d[0]), float(np.hypot(d[0], d[2]))


def pendulum(length: float = 1.0, mass: float = 1.0, angle: float = -math.pi / 2) -> dict:
    """Point-like bob on a massless rod, hinged to the world at the origin."""
    b = ChainBuilder("pendulum")
    r = 0.05
    b.link("bob", (WORLD, "origin"), angle, length, mass, joint={"id": "pivot", "kind": "revolute"},
           com=[length, 0.0, 0.0], inertia=[0.4 * mass * r * r] * 3)
    return b.doc


def serial_chain(n: int = 2, length: float = 1.0, mass: float = 1.0,
                 angles=None) -> dict:
    """Open chain of ``n`` rods; ``n = 2`` is the double pendulum."""
    b = ChainBuilder(f"chain{n}")
    angles = angles if angles is not None else [-math.pi / 2 + 0.3 * (i + 1) for i in range(n)]
    attach = (WORLD, "origin")
    for i in range(n):
        b.link(f"link{i + 1}", attach, angles[i], length, mass,
               joint={"id": f"J{i + 1}", "kind": "revolute"})
        attach = (f"link{i + 1}", "b")
    return b.doc


def four_bar(crank: float = 1.0, coupler: float = 2.2, rocker: float = 1.6, ground: float = 2.0,
             crank_angle: float = math.radians(60.0), density: float = 1.0,
             motor: dict | None = None, drive_rate: float | None = None,
             ramp: float = 1.0, width: float = 0.2) -> dict:
    """Spatial four-bar: four parallel-axis revolutes, loop closed at ground pivot D.

    ``drive_rate`` puts a velocity motor on the crank that ramps linearly from
    rest to the given rate (rad/s) over ``ramp`` seconds.
    """
    if drive_rate is not None and motor is None:
        motor = {"mode": "velocity_drive", "target": 0.0, "max_force": 1e4}
    A = np.zeros(3)
    D = np.array([ground, 0.0, 0.0])
    B = A + crank * np.array([math.cos(crank_angle), 0.0, math.sin(crank_angle)])
    # C: intersection of circles (B, coupler) and (D, rocker), upper branch
    d = np.linalg.norm(D - B)
    a = (coupler ** 2 - rocker ** 2 + d ** 2) / (2 * d)
    h = math.sqrt(max(coupler ** 2 - a ** 2, 0.0))
    e = (D - B) / d
    n = np.array([-e[2], 0.0, e[0]])
    C = B + a * e + h * n
    if C[2] < B[2] + a * e[2]:
        C = B + a * e - h * n
    bld = ChainBuilder("four_bar")
    bld.world_frame("D", D)
    joint_a = {"id": "A", "kind": "revolute"}
    if motor:
        joint_a["motor"] = motor
    bld.link("crank", (WORLD, "origin"), crank_angle, crank, density * crank, joint=joint_a, width=width)
    ang, L = _direction(B, C)
    bld.link("coupler", ("crank", "b"), ang, L, density * L, joint={"id": "B", "kind": "revolute"}, width=width)
    ang, L = _direction(C, D)
    bld.link("rocker", ("coupler", "b"), ang, L, density * L, joint={"id": "C", "kind": "revolute"}, width=width)
    bld.closure("D", (WORLD, "D"), ("rocker", "b"))
    if drive_rate is not None:
        bld.actuate("A", [(0.0, 0.0), (ramp, drive_rate), (ramp + 1e6, drive_rate)])
    return bld.doc


def equilibrium_cylinder(mass: float = 50.0, radius: float = 0.2, length: float = 0.5,
                         damping: float = 0.0, spin: float = 0.0) -> dict:
    """Cylinder on a hinge along its own axis through its centre of mass.

    With the default ``radius`` and ``mass`` the axial inertia is 1 kg m^2.
    """
    b = ChainBuilder("equilibrium_cylinder")
    b.world_frame("hinge", [0.0, 0.0, 1.0])
    joint = {"id": "hinge", "kind": "revolute"}
    if damping:
        joint["damping"] = damping
    b.link("cylinder", (WORLD, "hinge"), 0.0, 0.0, mass, joint=joint, com=[0.0, 0.0, 0.0],
           inertia=cylinder_inertia(mass, radius, length),
           angular_velocity=[0.0, spin, 0.0] if spin else None)
    return b.doc


def _trapezoid(peak: float, start: float, ramp: float, hold: float):
    return [(0.0, 0.0), (start, 0.0), (start + ramp, peak), (start + ramp + hold, peak),
            (start + 2 * ramp + hold, 0.0)]


def crane_analog(guide_cells: int = 2, grapple: bool = True, winch_damping: float = 0.05,
                 lift_speed: float = 0.05, fold_speed: float = -0.04,
                 link_width: float = 0.05) -> dict:
    """Multi-loop crane stand-in (synthetic geometry).

    Main arm on a base hinge lifted by a hydraulic cylinder, outer arm folded
    by a second cylinder, a winch drum hinged on the main arm, ``guide_cells``
    stacked double-parallelogram guide linkages under the outer arm and a
    hanging grapple. The defaults give 21 bodies and 27 joints (25 revolute,
    2 prismatic) with 6 independent loops.
    """
    b = ChainBuilder("crane_analog")
    pivot = np.array([0.0, 0.0, 2.0])
    b.world_frame("pivot", pivot)
    b.world_frame("lift_base", [0.9, 0.0, 0.6])
    main_angle = math.radians(30.0)
    b.link("main_arm", (WORLD, "pivot"), main_angle, 4.0, 100.0,
           joint={"id": "base_main", "kind": "revolute"},
           frames={"lift": [1.6, 0.0, 0.0], "fold": [2.6, 0.0, -0.35], "winch": [1.0, 0.0, -0.3]},
           width=0.2)

    # lift cylinder: barrel hinged to the ground, rod sliding in it, rod hinged to the main arm
    base = b.point(WORLD, "lift_base")
    target = b.point("main_arm", "lift")
    ang, L = _direction(base, target)
    b.link("lift_barrel", (WORLD, "lift_base"), ang, 1.0, 20.0,
           joint={"id": "lift_base_pin", "kind": "revolute"}, width=0.12)
    motor = {"mode": "velocity_drive", "target": 0.0, "max_force": 1e6}
    b.link("lift_rod", ("lift_barrel", "b"), ang, L - 1.0, 10.0,
           joint={"id": "lift_actuator", "kind": "prismatic", "axis": [1.0, 0.0, 0.0], "motor": motor},
           width=0.08)
    b.closure("lift_arm_pin", ("main_arm", "lift"), ("lift_rod", "b"))

    outer_angle = math.radians(-20.0)
    b.link("outer_arm", ("main_arm", "b"), outer_angle, 3.0, 60.0,
           joint={"id": "main_outer", "kind": "revolute"},
           frames={"fold": [0.7, 0.0, 0.35], "g0": [1.0, 0.0, -0.1], "g1": [1.4, 0.0, -0.1],
                   "g2": [1.8, 0.0, -0.1]},
           width=0.15)
    base = b.point("main_arm", "fold")
    target = b.point("outer_arm", "fold")
    ang, L = _direction(base, target)
    b.link("fold_barrel", ("main_arm", "fold"), ang, 0.5 * L, 15.0,
           joint={"id": "fold_base_pin", "kind": "revolute"}, width=0.1)
    b.link("fold_rod", ("fold_barrel", "b"), ang, 0.5 * L, 8.0,
           joint={"id": "fold_actuator", "kind": "prismatic", "axis": [1.0, 0.0, 0.0],
                  "motor": dict(motor)}, width=0.06)
    b.closure("fold_arm_pin", ("outer_arm", "fold"), ("fold_rod", "b"))

    winch_joint = {"id": "winch_hinge", "kind": "revolute"}
    if winch_damping:
        winch_joint["damping"] = winch_damping
    b.link("winch", ("main_arm", "winch"), main_angle, 0.0, 30.0, joint=winch_joint,
           com=[0.0, 0.0, 0.0], inertia=cylinder_inertia(30.0, 0.15, 0.4))

    # stacked double parallelograms: three equal cranks and a coupler per cell
    spacing = 0.4
    crank_len = 0.6
    base_body, base_frames = "outer_arm", ("g0", "g1", "g2")
    for cell in range(guide_cells):
        cranks = []
        for k, frame in enumerate(base_frames):
            cid = f"guide{cell}_crank{k}"
            b.link(cid, (base_body, frame), -math.pi / 2, crank_len, 5.0,
                   joint={"id": f"guide{cell}_pin{k}", "kind": "revolute"}, width=link_width)
            cranks.append(cid)
        coupler = f"guide{cell}_coupler"
        b.link(coupler, (cranks[0], "b"), outer_angle, spacing, 8.0,
               joint={"id": f"guide{cell}_c0", "kind": "revolute"},
               frames={"c2": [2 * spacing, 0.0, 0.0]}, width=link_width)
        b.closure(f"guide{cell}_c1", (coupler, "b"), (cranks[1], "b"))
        b.closure(f"guide{cell}_c2", (coupler, "c2"), (cranks[2], "b"))
        base_body, base_frames = coupler, ("a", "b", "c2")

    if grapple:
        b.link("rotator", ("outer_arm", "b"), -math.pi / 2, 0.4, 15.0,
               joint={"id": "tip_rotator", "kind": "revolute"}, width=link_width)
        b.link("grapple", ("rotator", "b"), -math.pi / 2, 0.3, 25.0,
               joint={"id": "rotator_grapple", "kind": "revolute", "axis": [1.0, 0.0, 0.0]},
               frames={"left": [0.3, 0.0, 0.15], "right": [0.3, 0.0, -0.15]}, width=link_width)
        for side, ang in (("left", -math.pi / 2 - 0.4), ("right", -math.pi / 2 + 0.4)):
            b.link(f"jaw_{side}", ("grapple", side), ang, 0.35, 6.0,
                   joint={"id": f"jaw_{side}_pin", "kind": "revolute"}, width=link_width)
            b.link(f"tip_{side}", (f"jaw_{side}", "b"), -math.pi / 2, 0.2, 3.0,
                   joint={"id": f"tip_{side}_pin", "kind": "revolute"}, width=link_width)

    b.actuate("lift_actuator", _trapezoid(lift_speed, 0.2, 0.3, 0.6))
    b.actuate("fold_actuator", _trapezoid(fold_speed, 0.3, 0.3, 0.5))
    return b.doc


def straight_chain(n: int = 4, length: float = 1.0) -> dict:
    """``n`` collinear links along +x; the closure joins the last tip to a world frame."""
    b = ChainBuilder(f"straight{n}")
    b.world_frame("end", [n * length, 0.0, 0.0])
    attach = (WORLD, "origin")
    for i in range(n):
        b.link(f"link{i + 1}", attach, 0.0, length, 1.0,
               joint={"id": f"J{i + 1}", "kind": "revolute"})
        attach = (f"link{i + 1}", "b")
    b.closure("close", (WORLD, "end"), (f"link{n}", "b"))
    return b.doc


GENERATORS = {
    "pendulum": pendulum,
    "serial_chain": serial_chain,
    "four_bar": four_bar,
    "equilibrium_cylinder": equilibrium_cylinder,
    "crane_analog": crane_analog,
    "straight_chain": straight_chain,
}
