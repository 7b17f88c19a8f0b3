"""JSON schemas of the scene document, version 1.

Both conventions share ``version``, ``convention``, ``gravity`` and
``actuation``. World-frame documents list bodies with world poses and joints
with a single world joint frame (or explicit body-frame anchors). Chained
documents list bodies in chain order, each attached to a frame of an earlier
body, and close loops with ``closures`` entries.
"""

from __future__ import annotations

import jsonschema

from .errors import SchemaError

VERSION = 1

_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_quat = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
_pose = {
    "type": "object",
    "properties": {"position": _vec3, "orientation": _quat},
    "additionalProperties": False,
}
_inertia = {"oneOf": [_vec3, {"type": "array", "items": _vec3, "minItems": 3, "maxItems": 3}]}
_kind = {"enum": ["revolute", "prismatic", "spherical", "fixed"]}
_motor = {
    "type": "object",
    "properties": {
        "mode": {"enum": ["velocity_drive", "position_drive"]},
        "target": {"type": "number"},
        "max_force": {"type": "number", "minimum": 0},
        "gains": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                  "minItems": 2, "maxItems": 2},
    },
    "required": ["mode"],
    "additionalProperties": False,
}
_joint_common = {
    "id": {"type": "string"},
    "kind": _kind,
    "axis": _vec3,
    "motor": _motor,
    "damping": {"type": "number", "minimum": 0},
}
_actuation = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "joint": {"type": "string"},
            "schedule": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                    "minItems": 2, "maxItems": 2}},
        },
        "required": ["joint", "schedule"],
        "additionalProperties": False,
    },
}
_mass_props = {
    "mass": {"type": "number"},
    "inertia": _inertia,
    "static": {"type": "boolean"},
    "linear_velocity": _vec3,
    "angular_velocity": _vec3,
}

WORLD_FRAME_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": VERSION},
        "convention": {"const": "world_frame"},
        "name": {"type": "string"},
        "gravity": _vec3,
        "bodies": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"id": {"type": "string"}, "position": _vec3, "orientation": _quat,
                               **_mass_props},
                "required": ["id", "mass", "inertia", "position"],
                "additionalProperties": False,
            },
        },
        "joints": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {**_joint_common, "parent": {"type": "string"},
                               "child": {"type": "string"}, "frame": _pose,
                               "anchor_parent": _pose, "anchor_child": _pose},
                "required": ["id", "kind", "parent", "child"],
                "oneOf": [{"required": ["frame"]}, {"required": ["anchor_parent", "anchor_child"]}],
                "additionalProperties": False,
            },
        },
        "actuation": _actuation,
    },
    "required": ["version", "convention", "bodies"],
    "additionalProperties": False,
}

_frame_ref = {
    "type": "object",
    "properties": {"body": {"type": "string"}, "frame": {"type": "string"}},
    "required": ["body", "frame"],
    "additionalProperties": False,
}

CHAINED_FRAME_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": VERSION},
        "convention": {"const": "chained_frame"},
        "name": {"type": "string"},
        "gravity": _vec3,
        "world_frames": {"type": "object", "additionalProperties": _pose},
        "bodies": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "string"},
                    "attach": _frame_ref,
                    "joint": {"type": "object", "properties": _joint_common,
                              "required": ["id", "kind"], "additionalProperties": False},
                    "frame_a": _pose,
                    "r_ab": _vec3,
                    "frames": {"type": "object", "additionalProperties": _vec3},
                    "com": _vec3,
                    **_mass_props,
                },
                "required": ["id", "attach", "r_ab", "mass", "inertia"],
                "additionalProperties": False,
            },
        },
        "closures": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {**_joint_common, "parent": _frame_ref, "child": _frame_ref},
                "required": ["id", "kind", "parent", "child"],
                "additionalProperties": False,
            },
        },
        "actuation": _actuation,
    },
    "required": ["version", "convention", "bodies"],
    "additionalProperties": False,
}


def validate(document: dict, schema: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path))
    if errors:
        err = min(errors, key=lambda e: -len(e.absolute_path))
        path = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise SchemaError(err.message, path.lstrip(".") or "<root>")
