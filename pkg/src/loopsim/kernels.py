"""Compiled batch kernels used by :class:`loopsim.solver.Simulation`.

They evaluate the same row definitions as :mod:`loopsim.constraints` for all
joints at once; the test suite checks both paths against each other.
"""

from __future__ import annotations

import math

import numba
import numpy as np

KIND_CODE = {"revolute": 0, "prismatic": 1, "spherical": 2, "fixed": 3}
ROWS_BY_CODE = np.array([5, 5, 3, 6])


@numba.njit(cache=True, inline="always")
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@numba.njit(cache=True)
def quat_mul(a, b):
    return np.array([
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ])


@numba.njit(cache=True)
def quat_mat(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@numba.njit(cache=True)
def rotations(quats):
    n = quats.shape[0]
    out = np.empty((n, 3, 3))
    for i in range(n):
        out[i] = quat_mat(quats[i])
    return out


@numba.njit(cache=True)
def _put(J, r, col, lin, ang):
    if col >= 0:
        for k in range(3):
            J[r, 6 * col + k] += lin[k]
            J[r, 6 * col + 3 + k] += ang[k]


@numba.njit(cache=True)
def joint_kernel(kind, parent, child, ap_pos, ap_rot, ac_pos, ac_rot, axis, t1, t2,
                 row_offset, n_rows, pos, rot, dyn_col, n_cols):
    """Rows of all joints.

    Returns ``J`` (rows x 6*bodies), ``C`` (rows), the free-axis Jacobian
    per joint (joints x 6*bodies), errors (joints x 2) and coordinates.
    ``parent``/``child`` index bodies, -1 is the world.
    """
    m = kind.shape[0]
    J = np.zeros((n_rows, 6 * n_cols))
    C = np.zeros(n_rows)
    AX = np.zeros((m, 6 * n_cols))
    err = np.zeros((m, 2))
    coord = np.zeros(m)
    zero = np.zeros(3)
    for j in range(m):
        p, c = parent[j], child[j]
        if p >= 0:
            x_p = pos[p]
            R_bp = rot[p]
            cp = dyn_col[p]
        else:
            x_p = zero
            R_bp = np.eye(3)
            cp = -1
        if c >= 0:
            x_c = pos[c]
            R_bc = rot[c]
            cc = dyn_col[c]
        else:
            x_c = zero
            R_bc = np.eye(3)
            cc = -1
        p_pa = x_p + R_bp @ ap_pos[j]
        p_ca = x_c + R_bc @ ac_pos[j]
        RP = R_bp @ ap_rot[j]
        RC = R_bc @ ac_rot[j]
        r_p = p_pa - x_p
        r_c = p_ca - x_c
        gap = p_ca - p_pa
        a_p = RP @ axis[j]
        a_c = RC @ axis[j]
        r0 = row_offset[j]
        k = kind[j]
        rows = 0
        if k == 0 or k == 2 or k == 3:
            for e_i in range(3):
                e = np.zeros(3)
                e[e_i] = 1.0
                _put(J, r0 + rows, cp, -e, -_cross(r_p, e))
                _put(J, r0 + rows, cc, e, _cross(r_c, e))
                C[r0 + rows] = gap[e_i]
                rows += 1
        if k == 1 or k == 3:
            pairs = ((1, 2), (2, 0), (0, 1))
            for pi in range(3):
                u = RC[:, pairs[pi][0]].copy()
                w = RP[:, pairs[pi][1]].copy()
                n = _cross(u, w)
                _put(J, r0 + rows, cp, zero, -n)
                _put(J, r0 + rows, cc, zero, n)
                C[r0 + rows] = u @ w
                rows += 1
        if k == 0:
            for t in (RP @ t1[j], RP @ t2[j]):
                n = _cross(a_c, t)
                _put(J, r0 + rows, cp, zero, -n)
                _put(J, r0 + rows, cc, zero, n)
                C[r0 + rows] = a_c @ t
                rows += 1
        if k == 1:
            for t in (RP @ t1[j], RP @ t2[j]):
                _put(J, r0 + rows, cp, -t, _cross(t, p_ca - x_p))
                _put(J, r0 + rows, cc, t, _cross(r_c, t))
                C[r0 + rows] = t @ gap
                rows += 1
        # free axis, errors, coordinate
        if k == 0:
            _put(AX, j, cp, zero, -a_p)
            _put(AX, j, cc, zero, a_p)
            tp = RP @ t1[j]
            tc = RC @ t1[j]
            coord[j] = math.atan2(a_p @ _cross(tp, tc), tp @ tc)
        elif k == 1:
            _put(AX, j, cp, -a_p, _cross(a_p, p_ca - x_p))
            _put(AX, j, cc, a_p, _cross(r_c, a_p))
            coord[j] = a_p @ gap
        if k == 1:
            tr = gap - (a_p @ gap) * a_p
            err[j, 0] = math.sqrt(tr @ tr)
        else:
            err[j, 0] = math.sqrt(gap @ gap)
        if k == 0:
            cr = _cross(a_p, a_c)
            err[j, 1] = math.atan2(math.sqrt(cr @ cr), a_p @ a_c)
        elif k == 1 or k == 3:
            rel = RC @ RP.T
            cosang = min(1.0, max(-1.0, 0.5 * (rel[0, 0] + rel[1, 1] + rel[2, 2] - 1.0)))
            s = 0.5 * math.sqrt((rel[2, 1] - rel[1, 2]) ** 2 + (rel[0, 2] - rel[2, 0]) ** 2
                                + (rel[1, 0] - rel[0, 1]) ** 2)
            err[j, 1] = math.atan2(s, cosang)
    return J, C, AX, err, coord


@numba.njit(cache=True)
def exp_update(quats, omega, dt):
    """``q <- normalize(exp(dt * omega) * q)`` for each body."""
    n = quats.shape[0]
    out = np.empty_like(quats)
    for i in range(n):
        rv = dt * omega[i]
        angle = math.sqrt(rv @ rv)
        dq = np.empty(4)
        if angle < 1e-8:
            s = 0.5 - angle * angle / 48.0
            dq[0] = 1.0 - angle * angle / 8.0
            dq[1:] = s * rv
            dq /= math.sqrt(dq @ dq)
        else:
            dq[0] = math.cos(0.5 * angle)
            dq[1:] = math.sin(0.5 * angle) / angle * rv
        q = quat_mul(dq, quats[i])
        out[i] = q / math.sqrt(q @ q)
    return out
