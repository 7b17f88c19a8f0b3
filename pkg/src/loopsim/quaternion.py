"""Quaternion helpers. Quaternions are stored as ``(w, x, y, z)`` arrays."""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: np.ndarray) -> np.ndarray:
    return q / np.sqrt(q @ q)


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return to_matrix(q) @ v


def from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0 or angle == 0.0:
        return IDENTITY.copy()
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


def exp_map(rotvec: np.ndarray) -> np.ndarray:
    """Unit quaternion of the rotation vector ``rotvec`` (axis * angle)."""
    angle = float(np.sqrt(rotvec @ rotvec))
    if angle < 1e-8:
        # Taylor expansion keeps full precision for tiny angles
        s = 0.5 - angle * angle / 48.0
        return normalize(np.concatenate(([1.0 - angle * angle / 8.0], s * rotvec)))
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) / angle * rotvec))


def rotation_angle(q: np.ndarray) -> float:
    """Angle in [0, pi] of the rotation represented by ``q``."""
    v = float(np.linalg.norm(q[1:]))
    return 2.0 * np.arctan2(v, abs(float(q[0])))


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3-vector cross product; far cheaper than ``np.cross`` for single vectors."""
    a0, a1, a2 = a
    b0, b1, b2 = b
    return np.array([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])
