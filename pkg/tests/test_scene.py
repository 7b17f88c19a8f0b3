import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopsim import builders
from loopsim.constraints import WORLD, Joint, measure_violation
from loopsim.dynamics import RigidBody
from loopsim.errors import (ChainOrderError, DanglingReference, InconsistentInitialization,
                            SchemaError)
from loopsim.scene import (PerturbationSpec, SceneModel, analyze_graph, chained_to_world,
                           dump_document, load, load_chained_frame, load_world_frame, perturb,
                           perturb_document, project_to_constraints, read_document, serialize,
                           write_document)

DOCS = {
    "pendulum": builders.pendulum,
    "double": lambda: builders.serial_chain(2),
    "four_bar": builders.four_bar,
    "cylinder": builders.equilibrium_cylinder,
    "crane": builders.crane_analog,
    "straight": builders.straight_chain,
}


def _world_doc():
    return chained_to_world(builders.four_bar())


# --------------------------------------------------------------------------- loading

def test_minimal_world_document():
    doc = {"version": 1, "convention": "world_frame",
           "bodies": [{"id": "box", "mass": 1.0, "inertia": [1, 1, 1], "position": [0, 0, 2]}]}
    scene = load(doc)
    assert len(scene.bodies) == 1 and scene.joints == []
    assert np.allclose(scene.bodies[0].pose.position, [0, 0, 2])
    assert np.allclose(scene.gravity, [0, 0, -9.81])


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d["joints"][0].update(kind="ball"), "joints[0].kind"),
    (lambda d: d["bodies"][0].pop("mass"), "bodies[0]"),
    (lambda d: d["bodies"][1].update(mass=-1.0), "bodies[1].mass"),
    (lambda d: d.update(version=99), "version"),
    (lambda d: d["joints"][2].update(axis=[0, 0]), "joints[2].axis"),
])
def test_schema_errors_name_the_field(mutate, path):
    doc = _world_doc()
    mutate(doc)
    with pytest.raises(SchemaError) as info:
        load(doc)
    assert info.value.path == path


def test_unknown_convention():
    with pytest.raises(SchemaError):
        load({"version": 1, "convention": "polar", "bodies": []})


def test_dangling_body_reference():
    doc = _world_doc()
    doc["joints"][0]["parent"] = "ghost"
    with pytest.raises(DanglingReference) as info:
        load(doc)
    assert info.value.path == "joints[0].parent"


def test_dangling_actuation_reference():
    doc = builders.four_bar(drive_rate=1.0)
    doc["actuation"][0]["joint"] = "Z"
    with pytest.raises(DanglingReference):
        load(doc)


def test_chain_order_error():
    doc = builders.four_bar()
    doc["bodies"][1]["attach"]["body"] = "rocker"
    with pytest.raises(ChainOrderError):
        load(doc)


def test_unsorted_schedule_rejected():
    doc = builders.four_bar(drive_rate=1.0)
    doc["actuation"][0]["schedule"].reverse()
    with pytest.raises(SchemaError):
        load(doc)


def test_duplicate_ids_rejected():
    body = RigidBody("a", 1.0, np.eye(3))
    with pytest.raises(SchemaError):
        SceneModel([body, body.copy()], [])
    joint = Joint("j", "spherical", WORLD, "a")
    with pytest.raises(SchemaError):
        SceneModel([body], [joint, joint.copy()])


# --------------------------------------------------------------------------- conventions

@pytest.mark.parametrize("name", DOCS)
def test_conventions_agree_on_world_poses(name):
    doc = DOCS[name]()
    chained = load_chained_frame(doc)
    world = load_world_frame(chained_to_world(doc))
    for a, b in zip(chained.bodies, world.bodies):
        assert a.id == b.id
        assert np.allclose(a.pose.position, b.pose.position, atol=1e-12)
        assert np.allclose(a.pose.orientation, b.pose.orientation, atol=1e-12)
    for ja, jb in zip(chained.joints, world.joints):
        fa = [chained.body_map.get(ja.child).pose.compose(ja.anchor_child).position]
        fb = [world.body_map.get(jb.child).pose.compose(jb.anchor_child).position]
        assert np.allclose(fa, fb, atol=1e-12)


@pytest.mark.parametrize("name", DOCS)
def test_consistent_chain_has_no_closure_gap(name):
    scene = load(DOCS[name]())
    assert scene.load_report["max_closure_residual"] < 1e-12
    assert measure_violation(scene.body_map, scene.joints).max_position < 1e-12


@pytest.mark.parametrize("name", DOCS)
def test_serialize_round_trip(name):
    scene = load(DOCS[name]())
    doc = serialize(scene)
    again = serialize(load(json.loads(dump_document(doc))))
    assert again.keys() == doc.keys()
    assert _close(doc, again)


def _close(a, b):
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k]) for k in a)
    if isinstance(a, list):
        return len(a) == len(b) and all(_close(x, y) for x, y in zip(a, b))
    if isinstance(a, float):
        return math.isclose(a, b, rel_tol=1e-15, abs_tol=1e-15)
    return a == b


def test_document_files_are_byte_stable(tmp_path):
    doc = builders.crane_analog()
    write_document(doc, tmp_path / "a.json")
    write_document(read_document(tmp_path / "a.json"), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


# --------------------------------------------------------------------------- graph analysis

@pytest.mark.parametrize("name, loops, mobility", [
    ("pendulum", 0, 1), ("double", 0, 2), ("four_bar", 1, -2), ("crane", 6, -9),
])
def test_graph_reports(name, loops, mobility):
    report = analyze_graph(load(DOCS[name]()))
    assert report.independent_loop_count == loops == len(report.loops)
    assert report.gruebler_mobility == mobility


def test_crane_counts():
    report = analyze_graph(load(builders.crane_analog()))
    assert (report.body_count, report.joint_count) == (21, 27)


def test_four_bar_loop_members():
    report = analyze_graph(load(builders.four_bar()))
    assert sorted(report.loops[0]) == ["A", "B", "C", "D"]


def _union_find_components(n, edges):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        parent[find(u)] = find(v)
    return len({find(x) for x in range(n)})


def _gf2_rank(vectors):
    rows = [int("".join(map(str, v)), 2) for v in vectors]
    rank = 0
    while rows:
        pivot = max(rows)
        if pivot == 0:
            break
        rows.remove(pivot)
        top = pivot.bit_length()
        rows = [r ^ pivot if r.bit_length() == top else r for r in rows]
        rank += 1
    return rank


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 7).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.tuples(st.integers(0, n), st.integers(0, n)).filter(lambda e: e[0] != e[1]),
                         max_size=14))))
def test_loop_count_on_random_multigraphs(graph):
    n, edges = graph
    names = [WORLD] + [f"b{i}" for i in range(n)]
    bodies = [RigidBody(f"b{i}", 1.0, np.eye(3)) for i in range(n)]
    joints = [Joint(f"j{k}", "spherical", names[u], names[v]) for k, (u, v) in enumerate(edges)]
    report = analyze_graph(SceneModel(bodies, joints))
    expected = len(edges) - (n + 1) + _union_find_components(n + 1, edges)
    assert report.independent_loop_count == expected == len(report.loops)
    # every reported loop is a closed cycle and the loops are independent
    index = {j.id: k for k, j in enumerate(joints)}
    vectors = []
    for loop in report.loops:
        degree = {}
        for jid in loop:
            for end in edges[index[jid]]:
                degree[end] = degree.get(end, 0) + 1
        assert all(d % 2 == 0 for d in degree.values())
        vectors.append([1 if j.id in loop else 0 for j in joints])
    assert _gf2_rank(vectors) == len(vectors)


# --------------------------------------------------------------------------- perturbation

def test_zero_perturbation_is_identity():
    scene = load(builders.four_bar())
    out, applied = perturb(scene, PerturbationSpec(0.0, seed=3))
    for a, b in zip(scene.bodies, out.bodies):
        assert np.array_equal(a.pose.position, b.pose.position)
    assert all(not off.any() for off in applied.values())


def test_fixed_anchor_offset_shows_up_as_violation():
    scene = load(builders.four_bar())
    out, applied = perturb(scene, PerturbationSpec(1e-3, "fixed_offset", targets="anchors"), only=["C"])
    report = measure_violation(out.body_map, out.joints)
    assert math.isclose(report.position_error["C"], 1e-3, rel_tol=1e-9)
    assert all(report.position_error[j] < 1e-12 for j in "ABD")
    # the original is untouched
    assert measure_violation(scene.body_map, scene.joints).max_position < 1e-12


def test_seeded_perturbation_is_reproducible():
    scene = load(builders.crane_analog())
    spec = PerturbationSpec(1e-3, seed=42)
    a, _ = perturb(scene, spec)
    b, _ = perturb(scene, spec)
    c, _ = perturb(scene, PerturbationSpec(1e-3, seed=43))
    pa = np.array([x.pose.position for x in a.bodies])
    assert np.array_equal(pa, [x.pose.position for x in b.bodies])
    assert not np.array_equal(pa, [x.pose.position for x in c.bodies])


@pytest.mark.parametrize("kwargs", [dict(magnitude=-1.0), dict(magnitude=math.inf),
                                    dict(distribution="gauss"), dict(targets="joints")])
def test_invalid_perturbation_spec(kwargs):
    with pytest.raises(SchemaError):
        PerturbationSpec(**kwargs)


def test_tangential_link_errors_add_up_along_the_chain():
    doc, _ = perturb_document(builders.straight_chain(4), PerturbationSpec(1e-3, "fixed_offset"))
    residual = load(doc).load_report["closure_residuals"]["close"]
    assert math.isclose(residual, 4e-3, rel_tol=1e-9)


@pytest.mark.parametrize("n", [2, 4, 8, 16])
@pytest.mark.parametrize("eps", [1e-6, 1e-3])
def test_chained_residual_is_at_most_linear(n, eps):
    doc, _ = perturb_document(builders.straight_chain(n), PerturbationSpec(eps, "fixed_offset"))
    assert load(doc).load_report["max_closure_residual"] <= n * eps * (1 + 1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_world_frame_perturbation_does_not_accumulate(seed):
    eps = 1e-3
    for n in (4, 16):
        world, _ = perturb_document(chained_to_world(builders.straight_chain(n)),
                                    PerturbationSpec(eps, seed=seed))
        gap_world = measure_violation(load(world).body_map, load(world).joints).max_position
        # two independently displaced ends at most
        assert gap_world <= 2 * math.sqrt(3) * eps
    chained, _ = perturb_document(builders.straight_chain(16), PerturbationSpec(eps, "fixed_offset"))
    assert load(chained).load_report["max_closure_residual"] > 2 * math.sqrt(3) * eps


def test_projection_closes_small_gaps():
    doc, _ = perturb_document(builders.four_bar(), PerturbationSpec(1e-6, seed=1))
    scene, residual = project_to_constraints(load(doc))
    assert residual <= 1e-5
    assert measure_violation(scene.body_map, scene.joints).max_position <= 1e-5


def test_projection_rejects_unassemblable_geometry():
    doc = builders.four_bar()
    for body in doc["bodies"]:
        body["r_ab"][0] *= 0.3  # total reach 1.44 m, ground pivot 2 m away
    with pytest.raises(InconsistentInitialization) as info:
        project_to_constraints(load(doc))
    assert info.value.step == 0


def test_loading_never_mutates_the_document():
    doc = builders.crane_analog()
    before = copy.deepcopy(doc)
    load(doc)
    chained_to_world(doc)
    perturb_document(doc, PerturbationSpec(1e-3))
    assert doc == before
