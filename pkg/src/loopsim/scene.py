"""Scene documents, the two loading conventions, and body-joint graph analysis."""

from __future__ import annotations

import copy
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quaternion as quat
from .constraints import WORLD, Joint, MotorParams, constraint_terms, measure_violation
from .dynamics import DEFAULT_GRAVITY, Pose, RigidBody, Twist
from .errors import (ChainOrderError, DanglingReference, InconsistentInitialization,
                     SchemaError)
from .schema import CHAINED_FRAME_SCHEMA, VERSION, WORLD_FRAME_SCHEMA, validate


@dataclass
class SceneModel:
    bodies: list[RigidBody]
    joints: list[Joint]
    gravity: np.ndarray = field(default_factory=lambda: DEFAULT_GRAVITY.copy())
    actuation: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    convention: str = "world_frame"
    name: str = ""
    load_report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        ids = [b.id for b in self.bodies]
        if len(set(ids)) != len(ids) or WORLD in ids:
            raise SchemaError("body ids must be unique and must not be 'world'", "bodies")
        jids = [j.id for j in self.joints]
        if len(set(jids)) != len(jids):
            raise SchemaError("joint ids must be unique", "joints")
        known = set(ids) | {WORLD}
        for j in self.joints:
            for end in (j.parent, j.child):
                if end not in known:
                    raise DanglingReference(f"joint {j.id!r} references unknown body {end!r}")
        for jid, sched in self.actuation.items():
            if jid not in jids:
                raise DanglingReference(f"actuation references unknown joint {jid!r}")
            times = [t for t, _ in sched]
            if times != sorted(times):
                raise SchemaError(f"schedule of {jid!r} is not time-sorted", "actuation")

    @property
    def body_map(self) -> dict[str, RigidBody]:
        return {b.id: b for b in self.bodies}

    def joint(self, joint_id: str) -> Joint:
        for j in self.joints:
            if j.id == joint_id:
                return j
        raise KeyError(joint_id)

    def copy(self) -> "SceneModel":
        return SceneModel([b.copy() for b in self.bodies], [j.copy() for j in self.joints],
                          self.gravity.copy(), copy.deepcopy(self.actuation), self.convention,
                          self.name, copy.deepcopy(self.load_report))


# --------------------------------------------------------------------------- parsing helpers

def _pose(d: dict | None) -> Pose:
    if not d:
        return Pose()
    return Pose(d.get("position", [0.0, 0.0, 0.0]), d.get("orientation", [1.0, 0.0, 0.0, 0.0]))


def _pose_dict(p: Pose) -> dict:
    return {"position": [float(x) for x in p.position],
            "orientation": [float(x) for x in p.orientation]}


def _inertia(value) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    return np.diag(a) if a.shape == (3,) else a


def _check_body(body: RigidBody, path: str) -> None:
    if body.static_flag:
        return
    if not body.mass > 0:
        raise SchemaError("dynamic body needs mass > 0", f"{path}.mass")
    I = body.inertia_body
    if not np.allclose(I, I.T) or np.min(np.linalg.eigvalsh(I)) <= 0:
        raise SchemaError("inertia must be symmetric positive definite", f"{path}.inertia")


def _motor(d: dict | None) -> MotorParams | None:
    if d is None:
        return None
    return MotorParams(d["mode"], float(d.get("target", 0.0)), float(d.get("max_force", np.inf)),
                       tuple(d.get("gains", (100.0, 20.0))))


def _motor_dict(m: MotorParams | None) -> dict | None:
    if m is None:
        return None
    out = {"mode": m.mode, "target": m.target}
    if np.isfinite(m.max_force):
        out["max_force"] = m.max_force
    if m.mode == "position_drive":
        out["gains"] = list(m.gains)
    return out


def _actuation(doc: dict) -> dict[str, list[tuple[float, float]]]:
    return {a["joint"]: [(float(t), float(v)) for t, v in a["schedule"]]
            for a in doc.get("actuation", [])}


def _make_joint(spec: dict, parent: str, child: str, anchor_parent: Pose, anchor_child: Pose,
                path: str) -> Joint:
    try:
        return Joint(spec["id"], spec["kind"], parent, child, anchor_parent, anchor_child,
                     spec.get("axis", [0.0, 0.0, 1.0]), _motor(spec.get("motor")),
                     float(spec.get("damping", 0.0)))
    except SchemaError as exc:
        raise SchemaError(str(exc).split(": ", 1)[-1], f"{path}.{exc.path}") from None


def read_document(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_document(document: dict, path: str | Path) -> None:
    Path(path).write_text(dump_document(document), encoding="utf-8")


def dump_document(document: dict) -> str:
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


def load(document: dict) -> SceneModel:
    conv = document.get("convention")
    if conv == "chained_frame":
        return load_chained_frame(document)
    if conv == "world_frame":
        return load_world_frame(document)
    raise SchemaError(f"unknown convention {conv!r}", "convention")


# --------------------------------------------------------------------------- world frame

def load_world_frame(document: dict) -> SceneModel:
    """Bodies keep their world poses; joint anchors are resolved per body."""
    validate(document, WORLD_FRAME_SCHEMA)
    bodies = []
    for i, b in enumerate(document["bodies"]):
        body = RigidBody(b["id"], float(b["mass"]), _inertia(b["inertia"]),
                         Pose(b["position"], b.get("orientation", [1.0, 0.0, 0.0, 0.0])),
                         Twist(b.get("linear_velocity", [0.0] * 3), b.get("angular_velocity", [0.0] * 3)),
                         bool(b.get("static", False)))
        _check_body(body, f"bodies[{i}]")
        bodies.append(body)
    poses = {b.id: b.pose for b in bodies}
    poses[WORLD] = Pose()
    joints = []
    for i, j in enumerate(document.get("joints", [])):
        for end in ("parent", "child"):
            if j[end] not in poses:
                raise DanglingReference(f"unknown body {j[end]!r}", f"joints[{i}].{end}")
        if "frame" in j:
            frame = _pose(j["frame"])
            ap = poses[j["parent"]].inverse().compose(frame)
            ac = poses[j["child"]].inverse().compose(frame)
        else:
            ap, ac = _pose(j["anchor_parent"]), _pose(j["anchor_child"])
        joints.append(_make_joint(j, j["parent"], j["child"], ap, ac, f"joints[{i}]"))
    return SceneModel(bodies, joints, document.get("gravity", DEFAULT_GRAVITY),
                      _actuation(document), "world_frame", document.get("name", ""),
                      {"convention": "world_frame", "closure_residuals": {},
                       "max_closure_residual": 0.0})


def serialize(scene: SceneModel) -> dict:
    """World-frame document with explicit body-frame anchors (exact round trip)."""
    doc = {"version": VERSION, "convention": "world_frame", "name": scene.name,
           "gravity": [float(g) for g in scene.gravity], "bodies": [], "joints": []}
    for b in scene.bodies:
        entry = {"id": b.id, "mass": float(b.mass),
                 "inertia": [[float(x) for x in row] for row in b.inertia_body],
                 "position": [float(x) for x in b.pose.position],
                 "orientation": [float(x) for x in b.pose.orientation]}
        if b.static_flag:
            entry["static"] = True
        if b.twist.linear.any():
            entry["linear_velocity"] = [float(x) for x in b.twist.linear]
        if b.twist.angular.any():
            entry["angular_velocity"] = [float(x) for x in b.twist.angular]
        doc["bodies"].append(entry)
    for j in scene.joints:
        entry = {"id": j.id, "kind": j.kind, "parent": j.parent, "child": j.child,
                 "axis": [float(x) for x in j.axis],
                 "anchor_parent": _pose_dict(j.anchor_parent),
                 "anchor_child": _pose_dict(j.anchor_child)}
        if j.motor is not None:
            entry["motor"] = _motor_dict(j.motor)
        if j.damping:
            entry["damping"] = float(j.damping)
        doc["joints"].append(entry)
    if scene.actuation:
        doc["actuation"] = [{"joint": k, "schedule": [[t, v] for t, v in s]}
                            for k, s in scene.actuation.items()]
    return doc


# --------------------------------------------------------------------------- chained frame

def _chain_frames(document: dict) -> tuple[dict, dict]:
    """World poses of every body's COM and of every named frame, by forward composition."""
    world_frames = {name: _pose(p) for name, p in document.get("world_frames", {}).items()}
    world_frames.setdefault("origin", Pose())
    frames: dict[tuple[str, str], Pose] = {(WORLD, k): v for k, v in world_frames.items()}
    body_pose: dict[str, Pose] = {}
    for i, b in enumerate(document["bodies"]):
        ref = (b["attach"]["body"], b["attach"]["frame"])
        if ref not in frames:
            raise ChainOrderError(f"frame {ref[1]!r} of {ref[0]!r} is not defined before use",
                                  f"bodies[{i}].attach")
        frame_a = frames[ref].compose(_pose(b.get("frame_a")))
        r_ab = np.asarray(b["r_ab"], dtype=float)
        com = np.asarray(b.get("com", 0.5 * r_ab), dtype=float)
        frames[(b["id"], "a")] = frame_a
        frames[(b["id"], "b")] = Pose(frame_a.transform_point(r_ab), frame_a.orientation)
        for name, vec in b.get("frames", {}).items():
            frames[(b["id"], name)] = Pose(frame_a.transform_point(vec), frame_a.orientation)
        body_pose[b["id"]] = Pose(frame_a.transform_point(com), frame_a.orientation)
    return body_pose, frames


def load_chained_frame(document: dict) -> SceneModel:
    """Compose world poses along the chain and report, not correct, loop-closure gaps."""
    validate(document, CHAINED_FRAME_SCHEMA)
    body_pose, frames = _chain_frames(document)
    poses = dict(body_pose)
    poses[WORLD] = Pose()
    bodies, joints = [], []
    for i, b in enumerate(document["bodies"]):
        body = RigidBody(b["id"], float(b["mass"]), _inertia(b["inertia"]), body_pose[b["id"]],
                         Twist(b.get("linear_velocity", [0.0] * 3), b.get("angular_velocity", [0.0] * 3)),
                         bool(b.get("static", False)))
        _check_body(body, f"bodies[{i}]")
        bodies.append(body)
        if "joint" not in b:
            continue
        ref = (b["attach"]["body"], b["attach"]["frame"])
        joint_frame = frames[ref]
        ap = poses[ref[0]].inverse().compose(joint_frame)
        frame_a = frames[(b["id"], "a")]
        ac = Pose(body.pose.inverse().transform_point(frame_a.position),
                  quat.multiply(quat.conjugate(body.pose.orientation), joint_frame.orientation))
        joints.append(_make_joint(b["joint"], ref[0], b["id"], ap, ac, f"bodies[{i}].joint"))
    residuals = {}
    for i, c in enumerate(document.get("closures", [])):
        refs = []
        for end in ("parent", "child"):
            ref = (c[end]["body"], c[end]["frame"])
            if ref not in frames:
                raise DanglingReference(f"unknown frame {ref}", f"closures[{i}].{end}")
            refs.append(ref)
        fp, fc = frames[refs[0]], frames[refs[1]]
        ap = poses[refs[0][0]].inverse().compose(fp)
        cp = poses[refs[1][0]]
        ac = Pose(cp.inverse().transform_point(fc.position),
                  quat.multiply(quat.conjugate(cp.orientation), fp.orientation))
        joints.append(_make_joint(c, refs[0][0], refs[1][0], ap, ac, f"closures[{i}]"))
        residuals[c["id"]] = float(np.linalg.norm(fc.position - fp.position))
    report = {"convention": "chained_frame", "closure_residuals": residuals,
              "max_closure_residual": max(residuals.values(), default=0.0)}
    return SceneModel(bodies, joints, document.get("gravity", DEFAULT_GRAVITY),
                      _actuation(document), "chained_frame", document.get("name", ""), report)


def chained_to_world(document: dict) -> dict:
    """World-frame document equivalent to a chained one; every joint gets one world frame."""
    validate(document, CHAINED_FRAME_SCHEMA)
    body_pose, frames = _chain_frames(document)
    out = {"version": VERSION, "convention": "world_frame", "name": document.get("name", ""),
           "gravity": document.get("gravity", list(DEFAULT_GRAVITY)), "bodies": [], "joints": []}
    for b in document["bodies"]:
        p = body_pose[b["id"]]
        entry = {"id": b["id"], "mass": b["mass"],
                 "inertia": [[float(x) for x in row] for row in _inertia(b["inertia"])],
                 "position": [float(x) for x in p.position],
                 "orientation": [float(x) for x in p.orientation]}
        for key in ("static", "linear_velocity", "angular_velocity"):
            if key in b:
                entry[key] = b[key]
        out["bodies"].append(entry)
        if "joint" in b:
            ref = (b["attach"]["body"], b["attach"]["frame"])
            out["joints"].append({**b["joint"], "parent": ref[0], "child": b["id"],
                                  "frame": _pose_dict(frames[ref])})
    for c in document.get("closures", []):
        ref = (c["parent"]["body"], c["parent"]["frame"])
        out["joints"].append({**{k: v for k, v in c.items() if k not in ("parent", "child")},
                              "parent": ref[0], "child": c["child"]["body"],
                              "frame": _pose_dict(frames[ref])})
    if "actuation" in document:
        out["actuation"] = copy.deepcopy(document["actuation"])
    return out


# --------------------------------------------------------------------------- graph analysis

@dataclass
class GraphReport:
    body_count: int
    joint_count: int
    independent_loop_count: int
    gruebler_mobility: int
    loops: list[list[str]]
    connected_components: int = 1

    def as_dict(self) -> dict:
        return {"body_count": self.body_count, "joint_count": self.joint_count,
                "independent_loop_count": self.independent_loop_count,
                "gruebler_mobility": self.gruebler_mobility,
                "connected_components": self.connected_components, "loops": self.loops}


def _shortest_path(adj: dict, n_vertices: int, src: int, dst: int, banned: int) -> list[int] | None:
    """Edge indices of a BFS shortest path avoiding edge ``banned``."""
    prev: dict[int, tuple[int, int]] = {src: (-1, -1)}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            break
        for e, w in adj[u]:
            if e != banned and w not in prev:
                prev[w] = (u, e)
                queue.append(w)
    if dst not in prev:
        return None
    path = []
    v = dst
    while v != src:
        u, e = prev[v]
        path.append(e)
        v = u
    return path


def cycle_basis(n_vertices: int, edges: list[tuple[int, int]]) -> list[list[int]]:
    """Deterministic cycle basis of a multigraph, shortest cycles first.

    Candidates are the shortest cycle through every edge plus the fundamental
    cycles of a BFS spanning forest; they are taken in order of (length, edge
    indices) while independent over GF(2).
    """
    adj: dict[int, list[tuple[int, int]]] = {v: [] for v in range(n_vertices)}
    for e, (u, v) in enumerate(edges):
        adj[u].append((e, v))
        adj[v].append((e, u))
    candidates = set()
    for e, (u, v) in enumerate(edges):
        path = _shortest_path(adj, n_vertices, u, v, e)
        if path is not None:
            candidates.add(tuple(sorted(path + [e])))
    # fundamental cycles guarantee the candidate set spans the cycle space
    parent_edge: dict[int, int] = {}
    depth: dict[int, int] = {}
    parent: dict[int, int] = {}
    tree = set()
    for root in range(n_vertices):
        if root in depth:
            continue
        depth[root] = 0
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for e, w in adj[u]:
                if w not in depth:
                    depth[w] = depth[u] + 1
                    parent[w] = u
                    parent_edge[w] = e
                    tree.add(e)
                    queue.append(w)
    for e, (u, v) in enumerate(edges):
        if e in tree:
            continue
        cyc = [e]
        a, b = u, v
        while a != b:
            if depth[a] >= depth[b]:
                cyc.append(parent_edge[a])
                a = parent[a]
            else:
                cyc.append(parent_edge[b])
                b = parent[b]
        candidates.add(tuple(sorted(cyc)))

    basis_bits: dict[int, int] = {}  # pivot bit -> reduced vector
    chosen = []
    for cyc in sorted(candidates, key=lambda c: (len(c), c)):
        vec = 0
        for e in cyc:
            vec ^= 1 << e
        while vec:
            pivot = vec.bit_length() - 1
            if pivot not in basis_bits:
                basis_bits[pivot] = vec
                chosen.append(list(cyc))
                break
            vec ^= basis_bits[pivot]
    return chosen


def _components(n_vertices: int, edges: list[tuple[int, int]]) -> int:
    seen = [False] * n_vertices
    adj = [[] for _ in range(n_vertices)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    count = 0
    for s in range(n_vertices):
        if seen[s]:
            continue
        count += 1
        stack = [s]
        seen[s] = True
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
    return count


def analyze_graph(scene: SceneModel) -> GraphReport:
    vertices = [WORLD] + [b.id for b in scene.bodies]
    vid = {v: i for i, v in enumerate(vertices)}
    edges = [(vid[j.parent], vid[j.child]) for j in scene.joints]
    comps = _components(len(vertices), edges)
    loops = cycle_basis(len(vertices), edges)
    movable = sum(b.is_dynamic for b in scene.bodies)
    mobility = 6 * movable - sum(6 - j.dof for j in scene.joints)
    return GraphReport(len(scene.bodies), len(scene.joints),
                       len(edges) - len(vertices) + comps, mobility,
                       [[scene.joints[e].id for e in cyc] for cyc in loops], comps)


# --------------------------------------------------------------------------- perturbation

@dataclass
class PerturbationSpec:
    magnitude: float = 0.0
    distribution: str = "per_axis_uniform"
    seed: int = 0
    targets: str = "body_positions"

    def __post_init__(self):
        if not (self.magnitude >= 0 and np.isfinite(self.magnitude)):
            raise SchemaError("magnitude must be finite and >= 0", "magnitude")
        if self.distribution not in ("per_axis_uniform", "fixed_offset"):
            raise SchemaError(f"unknown distribution {self.distribution!r}", "distribution")
        if self.targets not in ("anchors", "body_positions"):
            raise SchemaError(f"unknown targets {self.targets!r}", "targets")

    def offsets(self, count: int, directions: np.ndarray | None = None) -> np.ndarray:
        """``count`` offset vectors; ``fixed_offset`` uses ``directions`` (default +x)."""
        if self.distribution == "per_axis_uniform":
            rng = np.random.default_rng(self.seed)
            return rng.uniform(-self.magnitude, self.magnitude, size=(count, 3))
        if directions is None:
            directions = np.tile([1.0, 0.0, 0.0], (count, 1))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return self.magnitude * directions / norms


def perturb(scene: SceneModel, spec: PerturbationSpec,
            only: list[str] | None = None) -> tuple[SceneModel, dict[str, np.ndarray]]:
    """Perturbed copy of ``scene`` and the applied offsets keyed by body or joint id.

    ``anchors`` moves each joint's child anchor (body frame); ``body_positions``
    moves dynamic bodies in the world. ``only`` restricts the targets.
    """
    out = scene.copy()
    if spec.targets == "anchors":
        items = [j for j in out.joints if only is None or j.id in only]
    else:
        items = [b for b in out.bodies if b.is_dynamic and (only is None or b.id in only)]
    offsets = spec.offsets(len(items))
    applied = {}
    for item, off in zip(items, offsets):
        if spec.targets == "anchors":
            item.anchor_child.position = item.anchor_child.position + off
        else:
            item.pose.position = item.pose.position + off
        applied[item.id] = off
    return out, applied


def perturb_document(document: dict, spec: PerturbationSpec) -> tuple[dict, dict[str, np.ndarray]]:
    """Perturb the modeling data a user would type in.

    Chained documents get every link vector (``r_ab`` and extra frames)
    offset, so errors compose along the chain. World-frame documents get
    every dynamic body position offset; joint frames stay where they are.
    """
    doc = copy.deepcopy(document)
    applied = {}
    if doc["convention"] == "chained_frame":
        keys = []
        dirs = []
        for b in doc["bodies"]:
            keys.append((b, None))
            dirs.append(b["r_ab"])
            for name in sorted(b.get("frames", {})):
                keys.append((b, name))
                dirs.append(b["frames"][name])
        offs = spec.offsets(len(keys), np.array(dirs, dtype=float).reshape(-1, 3))
        for (b, name), off in zip(keys, offs):
            if name is None:
                b["r_ab"] = [float(x) for x in np.asarray(b["r_ab"]) + off]
                applied[f"{b['id']}.r_ab"] = off
            else:
                b["frames"][name] = [float(x) for x in np.asarray(b["frames"][name]) + off]
                applied[f"{b['id']}.{name}"] = off
    else:
        bodies = [b for b in doc["bodies"] if not b.get("static", False)]
        offs = spec.offsets(len(bodies))
        for b, off in zip(bodies, offs):
            b["position"] = [float(x) for x in np.asarray(b["position"]) + off]
            applied[b["id"]] = off
    return doc, applied


# --------------------------------------------------------------------------- strict closure

def project_to_constraints(scene: SceneModel, tolerance: float = 1e-5,
                           max_iterations: int = 30) -> tuple[SceneModel, float]:
    """Gauss-Newton projection of the initial poses onto the joint constraints.

    Models strict initialization: the initial geometry must be made exactly
    consistent before time stepping, with no relaxation. Raises
    :class:`InconsistentInitialization` when the least-squares residual stays
    above ``tolerance`` (the geometry cannot be assembled).
    """
    out = scene.copy()
    dyn = [b for b in out.bodies if b.is_dynamic]
    col = {b.id: i for i, b in enumerate(dyn)}
    bmap = out.body_map
    residual = np.inf
    for _ in range(max_iterations + 1):
        Js, Cs = [], []
        for j in out.joints:
            for Ja, Jb, C in constraint_terms(j, bmap):
                row = np.zeros(6 * len(dyn))
                if j.parent in col:
                    row[6 * col[j.parent]:6 * col[j.parent] + 6] += Ja
                if j.child in col:
                    row[6 * col[j.child]:6 * col[j.child] + 6] += Jb
                Js.append(row)
                Cs.append(C)
        if not Cs:
            return out, 0.0
        J, C = np.array(Js), np.array(Cs)
        new_residual = float(np.max(np.abs(C)))
        if new_residual <= tolerance:
            return out, new_residual
        if new_residual > 0.999 * residual:
            break
        residual = new_residual
        delta, *_ = np.linalg.lstsq(J, -C, rcond=1e-10)
        for b in dyn:
            d = delta[6 * col[b.id]:6 * col[b.id] + 6]
            b.pose.position = b.pose.position + d[:3]
            b.pose.orientation = quat.normalize(quat.multiply(quat.exp_map(d[3:]), b.pose.orientation))
    report = measure_violation(bmap, out.joints)
    raise InconsistentInitialization(
        f"initial geometry cannot be closed: residual {min(residual, new_residual):.3e} "
        f"(max joint gap {report.max_position:.3e} m) exceeds {tolerance:.1e}", step=0)
