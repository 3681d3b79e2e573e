"""Articulated forward dynamics, contact, and stepping, compiled with numba.

Coordinates: q = [base position (3), base rotation (9, row-major), joint
angles], qd = [base linear velocity (world), base angular velocity (world),
joint rates]. The mass matrix is assembled column-by-column from inverse
dynamics with unit accelerations; contact damping and regularized friction
are folded into the velocity-implicit left-hand side so stiff contacts stay
stable at the scheduled timesteps even when leg masses are scaled far down.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .model import ArticulatedModel, ContactParams, PackedModel

# Integrated base rotations are re-orthonormalized past this Frobenius drift.
_ORTHO_TOL = 1e-9

# Action-conversion PD gains for swing-foot tracking.
SWING_KP = 500.0
SWING_KD = 5.0

_MAX_CONTACT_ITERS = 6


# ---------------------------------------------------------------------------
# Small dense helpers
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _mm33(A, B, C):
    for i in range(3):
        for j in range(3):
            C[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True, inline="always")
def _mv33(A, v, out):
    for i in range(3):
        out[i] = A[i, 0] * v[0] + A[i, 1] * v[1] + A[i, 2] * v[2]


@njit(cache=True, inline="always")
def _mtv33(A, v, out):
    for i in range(3):
        out[i] = A[0, i] * v[0] + A[1, i] * v[1] + A[2, i] * v[2]


@njit(cache=True, inline="always")
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True)
def _axis_angle_rot(axis, angle, out):
    # Rodrigues for a unit axis; series form below 1e-8 rad.
    c = np.cos(angle)
    s = np.sin(angle)
    t = 1.0 - c
    x, y, z = axis[0], axis[1], axis[2]
    out[0, 0] = c + x * x * t
    out[0, 1] = x * y * t - z * s
    out[0, 2] = x * z * t + y * s
    out[1, 0] = x * y * t + z * s
    out[1, 1] = c + y * y * t
    out[1, 2] = y * z * t - x * s
    out[2, 0] = x * z * t - y * s
    out[2, 1] = y * z * t + x * s
    out[2, 2] = c + z * z * t


@njit(cache=True)
def _so3_exp(w, out):
    theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    if theta2 < 1e-16:
        # I + [w]x + 0.5 [w]x^2
        out[0, 0] = 1.0 - 0.5 * (w[1] * w[1] + w[2] * w[2])
        out[0, 1] = -w[2] + 0.5 * w[0] * w[1]
        out[0, 2] = w[1] + 0.5 * w[0] * w[2]
        out[1, 0] = w[2] + 0.5 * w[0] * w[1]
        out[1, 1] = 1.0 - 0.5 * (w[0] * w[0] + w[2] * w[2])
        out[1, 2] = -w[0] + 0.5 * w[1] * w[2]
        out[2, 0] = -w[1] + 0.5 * w[0] * w[2]
        out[2, 1] = w[0] + 0.5 * w[1] * w[2]
        out[2, 2] = 1.0 - 0.5 * (w[0] * w[0] + w[1] * w[1])
        return
    theta = np.sqrt(theta2)
    axis = np.empty(3)
    axis[0] = w[0] / theta
    axis[1] = w[1] / theta
    axis[2] = w[2] / theta
    _axis_angle_rot(axis, theta, out)


@njit(cache=True)
def _reorthonormalize(R):
    # Gram-Schmidt on rows once drift exceeds the tolerance.
    drift = 0.0
    for i in range(3):
        for j in range(3):
            g = R[0, i] * R[0, j] + R[1, i] * R[1, j] + R[2, i] * R[2, j]
            if i == j:
                g -= 1.0
            drift += g * g
    if drift <= _ORTHO_TOL * _ORTHO_TOL:
        return
    n0 = np.sqrt(R[0, 0] ** 2 + R[0, 1] ** 2 + R[0, 2] ** 2)
    for j in range(3):
        R[0, j] /= n0
    d = R[1, 0] * R[0, 0] + R[1, 1] * R[0, 1] + R[1, 2] * R[0, 2]
    for j in range(3):
        R[1, j] -= d * R[0, j]
    n1 = np.sqrt(R[1, 0] ** 2 + R[1, 1] ** 2 + R[1, 2] ** 2)
    for j in range(3):
        R[1, j] /= n1
    R[2, 0] = R[0, 1] * R[1, 2] - R[0, 2] * R[1, 1]
    R[2, 1] = R[0, 2] * R[1, 0] - R[0, 0] * R[1, 2]
    R[2, 2] = R[0, 0] * R[1, 1] - R[0, 1] * R[1, 0]


@njit(cache=True)
def _cholesky(A, L, n):
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return 1
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return 0


@njit(cache=True)
def _chol_solve(L, b, x, n):
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]


# ---------------------------------------------------------------------------
# Kinematics and inverse dynamics passes (single environment)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _fk(parent, axis, tree_rot, tree_pos, p0, R0, qj, R_w, p_w, s_w):
    nl = parent.shape[0]
    for r in range(3):
        p_w[0, r] = p0[r]
        for c in range(3):
            R_w[0, r, c] = R0[r, c]
        s_w[0, r] = 0.0
    Rj = np.empty((3, 3))
    Rpre = np.empty((3, 3))
    for i in range(1, nl):
        par = parent[i]
        for r in range(3):
            p_w[i, r] = (p_w[par, r] + R_w[par, r, 0] * tree_pos[i, 0]
                         + R_w[par, r, 1] * tree_pos[i, 1] + R_w[par, r, 2] * tree_pos[i, 2])
        _mm33(R_w[par], tree_rot[i], Rpre)
        _axis_angle_rot(axis[i], qj[i - 1], Rj)
        _mm33(Rpre, Rj, R_w[i])
        _mv33(R_w[i], axis[i], s_w[i])


@njit(cache=True)
def _velocities(parent, s_w, p_w, v0, w0, qdj, w_l, v_l):
    nl = parent.shape[0]
    for r in range(3):
        w_l[0, r] = w0[r]
        v_l[0, r] = v0[r]
    for i in range(1, nl):
        par = parent[i]
        dx = p_w[i, 0] - p_w[par, 0]
        dy = p_w[i, 1] - p_w[par, 1]
        dz = p_w[i, 2] - p_w[par, 2]
        v_l[i, 0] = v_l[par, 0] + w_l[par, 1] * dz - w_l[par, 2] * dy
        v_l[i, 1] = v_l[par, 1] + w_l[par, 2] * dx - w_l[par, 0] * dz
        v_l[i, 2] = v_l[par, 2] + w_l[par, 0] * dy - w_l[par, 1] * dx
        for r in range(3):
            w_l[i, r] = w_l[par, r] + s_w[i, r] * qdj[i - 1]


@njit(cache=True)
def _rnea(parent, mass, inertia, com, s_w, p_w, R_w, w_l, qdj,
          a0, alpha0, qddj, g, f_buf, n_buf, acc, alp, tau_out):
    """Generalized force required for the given accelerations.

    Includes gravity and velocity products from w_l/qdj; external forces are
    handled by the callers. tau_out = [base force, base moment about base
    origin, joint torques].
    """
    nl = parent.shape[0]
    t1 = np.empty(3)
    t2 = np.empty(3)
    t3 = np.empty(3)
    r_c = np.empty(3)
    # Forward: accelerations.
    for r in range(3):
        alp[0, r] = alpha0[r]
        acc[0, r] = a0[r]
    for i in range(1, nl):
        par = parent[i]
        for r in range(3):
            t1[r] = p_w[i, r] - p_w[par, r]
        _cross(alp[par], t1, t2)
        _cross(w_l[par], t1, t3)
        _cross(w_l[par], t3, t1)
        for r in range(3):
            acc[i, r] = acc[par, r] + t2[r] + t1[r]
        _cross(w_l[par], s_w[i], t2)
        for r in range(3):
            alp[i, r] = alp[par, r] + s_w[i, r] * qddj[i - 1] + t2[r] * qdj[i - 1]
    # Per-link net force/moment about the link origin.
    for i in range(nl):
        _mv33(R_w[i], com[i], r_c)
        _cross(alp[i], r_c, t1)
        _cross(w_l[i], r_c, t2)
        _cross(w_l[i], t2, t3)
        ax = acc[i, 0] + t1[0] + t3[0]
        ay = acc[i, 1] + t1[1] + t3[1]
        az = acc[i, 2] + t1[2] + t3[2]
        fx = mass[i] * (ax - g[0])
        fy = mass[i] * (ay - g[1])
        fz = mass[i] * (az - g[2])
        # N = I_w * alpha + w x I_w * w, with I_w = R I R^T.
        _mtv33(R_w[i], alp[i], t1)
        _mv33(inertia[i], t1, t2)
        _mv33(R_w[i], t2, t3)
        nx, ny, nz = t3[0], t3[1], t3[2]
        _mtv33(R_w[i], w_l[i], t1)
        _mv33(inertia[i], t1, t2)
        _mv33(R_w[i], t2, t3)
        nx += w_l[i, 1] * t3[2] - w_l[i, 2] * t3[1]
        ny += w_l[i, 2] * t3[0] - w_l[i, 0] * t3[2]
        nz += w_l[i, 0] * t3[1] - w_l[i, 1] * t3[0]
        f_buf[i, 0] = fx
        f_buf[i, 1] = fy
        f_buf[i, 2] = fz
        n_buf[i, 0] = nx + r_c[1] * fz - r_c[2] * fy
        n_buf[i, 1] = ny + r_c[2] * fx - r_c[0] * fz
        n_buf[i, 2] = nz + r_c[0] * fy - r_c[1] * fx
    # Backward accumulation to the root.
    for i in range(nl - 1, 0, -1):
        par = parent[i]
        dx = p_w[i, 0] - p_w[par, 0]
        dy = p_w[i, 1] - p_w[par, 1]
        dz = p_w[i, 2] - p_w[par, 2]
        tau_out[6 + i - 1] = (s_w[i, 0] * n_buf[i, 0] + s_w[i, 1] * n_buf[i, 1]
                              + s_w[i, 2] * n_buf[i, 2])
        n_buf[par, 0] += n_buf[i, 0] + dy * f_buf[i, 2] - dz * f_buf[i, 1]
        n_buf[par, 1] += n_buf[i, 1] + dz * f_buf[i, 0] - dx * f_buf[i, 2]
        n_buf[par, 2] += n_buf[i, 2] + dx * f_buf[i, 1] - dy * f_buf[i, 0]
        for r in range(3):
            f_buf[par, r] += f_buf[i, r]
    for r in range(3):
        tau_out[r] = f_buf[0, r]
        tau_out[3 + r] = n_buf[0, r]


@njit(cache=True)
def _mass_matrix(parent, mass, inertia, com, s_w, p_w, R_w,
                 w0_zero, qd_zero, g_zero, f_buf, n_buf, acc, alp, M):
    nd = 6 + parent.shape[0] - 1
    a0 = np.zeros(3)
    alpha0 = np.zeros(3)
    qddj = np.zeros(parent.shape[0] - 1)
    col = np.empty(nd)
    for k in range(nd):
        for r in range(3):
            a0[r] = 1.0 if k == r else 0.0
            alpha0[r] = 1.0 if k == 3 + r else 0.0
        for j in range(parent.shape[0] - 1):
            qddj[j] = 1.0 if k == 6 + j else 0.0
        _rnea(parent, mass, inertia, com, s_w, p_w, R_w, w0_zero, qd_zero,
              a0, alpha0, qddj, g_zero, f_buf, n_buf, acc, alp, col)
        for r in range(nd):
            M[r, k] = col[r]


@njit(cache=True)
def _foot_state(parent, foot_link, foot_offset, p_w, R_w, w_l, v_l, feet, vfeet):
    nf = foot_link.shape[0]
    t = np.empty(3)
    for f in range(nf):
        k = foot_link[f]
        _mv33(R_w[k], foot_offset[f], t)
        for r in range(3):
            feet[f, r] = p_w[k, r] + t[r]
        vfeet[f, 0] = v_l[k, 0] + w_l[k, 1] * t[2] - w_l[k, 2] * t[1]
        vfeet[f, 1] = v_l[k, 1] + w_l[k, 2] * t[0] - w_l[k, 0] * t[2]
        vfeet[f, 2] = v_l[k, 2] + w_l[k, 0] * t[1] - w_l[k, 1] * t[0]


@njit(cache=True)
def _foot_jacobian_cols(parent, axis, foot_link, p_w, s_w, foot_pt, f,
                        Jc, idx):
    """Nonzero Jacobian columns of foot f: 6 base dofs plus its chain joints.

    Returns the column count; Jc[:, :cnt] holds d(foot velocity)/d(qd[idx]).
    """
    cnt = 6
    for r in range(3):
        for c in range(3):
            Jc[r, c] = 1.0 if r == c else 0.0
    rx = foot_pt[0] - p_w[0, 0]
    ry = foot_pt[1] - p_w[0, 1]
    rz = foot_pt[2] - p_w[0, 2]
    # -skew(r) block for the base angular dofs.
    Jc[0, 3] = 0.0
    Jc[0, 4] = rz
    Jc[0, 5] = -ry
    Jc[1, 3] = -rz
    Jc[1, 4] = 0.0
    Jc[1, 5] = rx
    Jc[2, 3] = ry
    Jc[2, 4] = -rx
    Jc[2, 5] = 0.0
    for r in range(6):
        idx[r] = r
    k = foot_link[f]
    while k > 0:
        dx = foot_pt[0] - p_w[k, 0]
        dy = foot_pt[1] - p_w[k, 1]
        dz = foot_pt[2] - p_w[k, 2]
        Jc[0, cnt] = s_w[k, 1] * dz - s_w[k, 2] * dy
        Jc[1, cnt] = s_w[k, 2] * dx - s_w[k, 0] * dz
        Jc[2, cnt] = s_w[k, 0] * dy - s_w[k, 1] * dx
        idx[cnt] = 6 + k - 1
        cnt += 1
        k = parent[k]
    return cnt


@njit(cache=True)
def _terrain_query(px, py, pz, ground_h, wall_x):
    """Signed distance to the nearest surface and its normal."""
    dist = pz - ground_h
    nx, ny, nz = 0.0, 0.0, 1.0
    if not np.isnan(wall_x):
        wd = wall_x - px
        if wd < dist:
            dist = wd
            nx, ny, nz = -1.0, 0.0, 0.0
    return dist, nx, ny, nz


# ---------------------------------------------------------------------------
# Combined control-step kernel
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def step_batch(parent, axis, tree_rot, tree_pos, mass, inertia, com,
               foot_link, foot_offset, foot_radius, torque_limit, gravity,
               trunk_col_h, knee_col_h, ground_h, wall_x,
               k_n, d_n, mu_c, v_slip,
               q, qd, fault,
               mode, tau_fixed, grf_cmd, swing_tgt, swing_flag, dist_wrench,
               dt, n_sub,
               feet_out, contact_out, com_out, vcom_out, tau_out):
    """Advance every environment by one control period of n_sub substeps.

    mode 0 applies tau_fixed directly; mode 1 converts the held hybrid action
    (grf_cmd for stance, task-space PD towards swing_tgt for swing) into
    joint torques at every substep. Contact damping and regularized friction
    are implicit in velocity; contacts whose implicit normal force would pull
    are deactivated and the solve repeated.
    """
    n_env = q.shape[0]
    nl = parent.shape[0]
    nj = nl - 1
    nd = 6 + nj
    nf = foot_link.shape[0]
    for e in prange(n_env):
        if fault[e] != 0:
            continue
        R_w = np.empty((nl, 3, 3))
        p_w = np.empty((nl, 3))
        s_w = np.empty((nl, 3))
        w_l = np.empty((nl, 3))
        v_l = np.empty((nl, 3))
        w0z = np.zeros((nl, 3))
        qdz = np.zeros(nj)
        gz = np.zeros(3)
        f_buf = np.empty((nl, 3))
        n_buf = np.empty((nl, 3))
        acc = np.empty((nl, 3))
        alp = np.empty((nl, 3))
        M = np.empty((nd, nd))
        LHS = np.empty((nd, nd))
        L = np.empty((nd, nd))
        bias = np.empty(nd)
        rhs0 = np.empty(nd)
        rhs = np.empty(nd)
        qdd = np.empty(nd)
        tau12 = np.empty(nj)
        feet = np.empty((nf, 3))
        vfeet = np.empty((nf, 3))
        pen = np.empty(nf)
        nrm = np.empty((nf, 3))
        ct_coef = np.empty(nf)
        active = np.zeros(nf, dtype=np.uint8)
        Jc = np.empty((nf, 3, nd))
        idx = np.empty((nf, nd), dtype=np.int64)
        cnt = np.empty(nf, dtype=np.int64)
        DJ = np.empty((3, nd))
        fvec = np.empty(3)
        t3 = np.empty(3)
        Rtmp = np.empty((3, 3))
        Rnew = np.empty((3, 3))

        p0 = q[e, 0:3]
        R0 = q[e, 3:12].reshape(3, 3)
        qj = q[e, 12:]
        v0 = qd[e, 0:3]
        w0 = qd[e, 3:6]
        qdj = qd[e, 6:]

        bad = 0
        for sub in range(n_sub):
            _fk(parent, axis, tree_rot, tree_pos, p0, R0, qj, R_w, p_w, s_w)
            _velocities(parent, s_w, p_w, v0, w0, qdj, w_l, v_l)
            _foot_state(parent, foot_link, foot_offset, p_w, R_w, w_l, v_l, feet, vfeet)

            # Contact geometry.
            for f in range(nf):
                dist, nx, ny, nz = _terrain_query(feet[f, 0], feet[f, 1], feet[f, 2],
                                                  ground_h, wall_x)
                pen[f] = foot_radius - dist
                nrm[f, 0] = nx
                nrm[f, 1] = ny
                nrm[f, 2] = nz
                active[f] = 1 if pen[f] > 0.0 else 0

            # Joint torques.
            if mode == 0:
                for j in range(nj):
                    tau12[j] = tau_fixed[e, j]
            else:
                for f in range(nf):
                    c = _foot_jacobian_cols(parent, axis, foot_link, p_w, s_w,
                                            feet[f], f, Jc[f], idx[f])
                    cnt[f] = c
                    if swing_flag[e, f]:
                        for r in range(3):
                            fvec[r] = (SWING_KP * (swing_tgt[e, f, r] - feet[f, r])
                                       - SWING_KD * vfeet[f, r])
                    elif active[f] == 1:
                        for r in range(3):
                            fvec[r] = grf_cmd[e, f, r]
                    else:
                        for r in range(3):
                            fvec[r] = 0.0
                    for a in range(6, c):
                        j = idx[f, a] - 6
                        t = (Jc[f, 0, a] * fvec[0] + Jc[f, 1, a] * fvec[1]
                             + Jc[f, 2, a] * fvec[2])
                        if t > torque_limit:
                            t = torque_limit
                        elif t < -torque_limit:
                            t = -torque_limit
                        tau12[j] = t
            if sub == 0:
                for j in range(nj):
                    tau_out[e, j] = tau12[j]
            if mode == 0:
                for f in range(nf):
                    cnt[f] = _foot_jacobian_cols(parent, axis, foot_link, p_w, s_w,
                                                 feet[f], f, Jc[f], idx[f])

            # Bias forces (gravity + velocity products), no externals.
            _rnea(parent, mass, inertia, com, s_w, p_w, R_w, w_l, qdj,
                  gz, gz, qdz, gravity, f_buf, n_buf, acc, alp, bias)
            _mass_matrix(parent, mass, inertia, com, s_w, p_w, R_w,
                         w0z, qdz, gz, f_buf, n_buf, acc, alp, M)

            # Swing-PD damping taken implicitly on the leg-joint columns;
            # explicit damping is unstable once leg inertias are scaled far
            # down along the homotopy path.
            if mode == 1:
                for f in range(nf):
                    if not swing_flag[e, f]:
                        continue
                    for a in range(6, cnt[f]):
                        ia = idx[f, a]
                        for b in range(6, cnt[f]):
                            s = (Jc[f, 0, a] * Jc[f, 0, b] + Jc[f, 1, a] * Jc[f, 1, b]
                                 + Jc[f, 2, a] * Jc[f, 2, b])
                            M[ia, idx[f, b]] += dt * SWING_KD * s

            for r in range(nd):
                rhs0[r] = -bias[r]
            for j in range(nj):
                rhs0[6 + j] += tau12[j]
            # Disturbance wrench: force at the trunk COM plus a pure torque.
            _mv33(R_w[0], com[0], t3)
            fx = dist_wrench[e, 0]
            fy = dist_wrench[e, 1]
            fz = dist_wrench[e, 2]
            rhs0[0] += fx
            rhs0[1] += fy
            rhs0[2] += fz
            rhs0[3] += dist_wrench[e, 3] + t3[1] * fz - t3[2] * fy
            rhs0[4] += dist_wrench[e, 4] + t3[2] * fx - t3[0] * fz
            rhs0[5] += dist_wrench[e, 5] + t3[0] * fy - t3[1] * fx

            # Friction regularization strength from the explicit normal estimate.
            for f in range(nf):
                if active[f] == 1:
                    vn = (vfeet[f, 0] * nrm[f, 0] + vfeet[f, 1] * nrm[f, 1]
                          + vfeet[f, 2] * nrm[f, 2])
                    fn_est = k_n * pen[f] - d_n * vn
                    if fn_est < 0.0:
                        fn_est = 0.0
                    vtx = vfeet[f, 0] - vn * nrm[f, 0]
                    vty = vfeet[f, 1] - vn * nrm[f, 1]
                    vtz = vfeet[f, 2] - vn * nrm[f, 2]
                    vt = np.sqrt(vtx * vtx + vty * vty + vtz * vtz)
                    if vt < v_slip:
                        vt = v_slip
                    ct_coef[f] = mu_c * fn_est / vt

            # Velocity-implicit contact solve with pull-free active set.
            ok = 0
            for _it in range(_MAX_CONTACT_ITERS):
                for r in range(nd):
                    for c in range(nd):
                        LHS[r, c] = M[r, c]
                    rhs[r] = rhs0[r]
                for f in range(nf):
                    if active[f] == 0:
                        continue
                    c = cnt[f]
                    # D = d_n n n^T + ct (I - n n^T); DJ = D @ Jc.
                    for b in range(c):
                        jn = (nrm[f, 0] * Jc[f, 0, b] + nrm[f, 1] * Jc[f, 1, b]
                              + nrm[f, 2] * Jc[f, 2, b])
                        for r in range(3):
                            DJ[r, b] = (ct_coef[f] * (Jc[f, r, b] - jn * nrm[f, r])
                                        + d_n * jn * nrm[f, r])
                    for a in range(c):
                        ia = idx[f, a]
                        for b in range(c):
                            s = (Jc[f, 0, a] * DJ[0, b] + Jc[f, 1, a] * DJ[1, b]
                                 + Jc[f, 2, a] * DJ[2, b])
                            LHS[ia, idx[f, b]] += dt * s
                    # Explicit spring plus -D v_now.
                    vn = (vfeet[f, 0] * nrm[f, 0] + vfeet[f, 1] * nrm[f, 1]
                          + vfeet[f, 2] * nrm[f, 2])
                    for r in range(3):
                        fvec[r] = (k_n * pen[f] * nrm[f, r]
                                   - d_n * vn * nrm[f, r]
                                   - ct_coef[f] * (vfeet[f, r] - vn * nrm[f, r]))
                    for a in range(c):
                        rhs[idx[f, a]] += (Jc[f, 0, a] * fvec[0] + Jc[f, 1, a] * fvec[1]
                                           + Jc[f, 2, a] * fvec[2])
                if _cholesky(LHS, L, nd) != 0:
                    bad = 1
                    break
                _chol_solve(L, rhs, qdd, nd)
                # Deactivate contacts whose implicit normal force pulls.
                ok = 1
                for f in range(nf):
                    if active[f] == 0:
                        continue
                    vpx = vfeet[f, 0]
                    vpy = vfeet[f, 1]
                    vpz = vfeet[f, 2]
                    for a in range(cnt[f]):
                        da = dt * qdd[idx[f, a]]
                        vpx += Jc[f, 0, a] * da
                        vpy += Jc[f, 1, a] * da
                        vpz += Jc[f, 2, a] * da
                    vn_new = vpx * nrm[f, 0] + vpy * nrm[f, 1] + vpz * nrm[f, 2]
                    if k_n * pen[f] - d_n * vn_new < 0.0:
                        active[f] = 0
                        ok = 0
                if ok == 1 or bad == 1:
                    break
            if bad == 1:
                fault[e] = 1
                break

            # Semi-implicit Euler.
            for r in range(3):
                v0[r] += dt * qdd[r]
                w0[r] += dt * qdd[3 + r]
            for j in range(nj):
                qdj[j] += dt * qdd[6 + j]
            for r in range(3):
                p0[r] += dt * v0[r]
                t3[r] = dt * w0[r]
            _so3_exp(t3, Rtmp)
            _mm33(Rtmp, R0, Rnew)
            for r in range(3):
                for c in range(3):
                    R0[r, c] = Rnew[r, c]
            _reorthonormalize(R0)
            for j in range(nj):
                qj[j] += dt * qdj[j]

            # Fault checks: non-finite state or trunk/knee collision.
            s = 0.0
            for r in range(3):
                s += p0[r] + v0[r] + w0[r]
                for c in range(3):
                    s += R0[r, c]
            for j in range(nj):
                s += qj[j] + qdj[j]
            if not np.isfinite(s):
                fault[e] = 1
                break
            diverged = 0
            for r in range(3):
                if abs(v0[r]) > 1e3 or abs(w0[r]) > 1e4:
                    diverged = 1
            for j in range(nj):
                if abs(qdj[j]) > 1e5:
                    diverged = 1
            if diverged == 1:
                fault[e] = 1
                break
            if p0[2] < trunk_col_h:
                fault[e] = 2
                break
            if not np.isnan(wall_x) and p0[0] > wall_x - trunk_col_h:
                fault[e] = 2
                break
            knee_bad = 0
            for f in range(nf):
                k = foot_link[f]
                if p_w[k, 2] + dt * v_l[k, 2] < knee_col_h:
                    knee_bad = 1
                if not np.isnan(wall_x) and p_w[k, 0] > wall_x - knee_col_h:
                    knee_bad = 1
            if knee_bad == 1:
                fault[e] = 2
                break

        # Final kinematic summary for observations and labels.
        _fk(parent, axis, tree_rot, tree_pos, p0, R0, qj, R_w, p_w, s_w)
        _velocities(parent, s_w, p_w, v0, w0, qdj, w_l, v_l)
        _foot_state(parent, foot_link, foot_offset, p_w, R_w, w_l, v_l, feet, vfeet)
        m_tot = 0.0
        for r in range(3):
            com_out[e, r] = 0.0
            vcom_out[e, r] = 0.0
        for i in range(nl):
            _mv33(R_w[i], com[i], t3)
            m_tot += mass[i]
            cx = p_w[i, 0] + t3[0]
            cy = p_w[i, 1] + t3[1]
            cz = p_w[i, 2] + t3[2]
            com_out[e, 0] += mass[i] * cx
            com_out[e, 1] += mass[i] * cy
            com_out[e, 2] += mass[i] * cz
            vcom_out[e, 0] += mass[i] * (v_l[i, 0] + w_l[i, 1] * t3[2] - w_l[i, 2] * t3[1])
            vcom_out[e, 1] += mass[i] * (v_l[i, 1] + w_l[i, 2] * t3[0] - w_l[i, 0] * t3[2])
            vcom_out[e, 2] += mass[i] * (v_l[i, 2] + w_l[i, 0] * t3[1] - w_l[i, 1] * t3[0])
        for r in range(3):
            com_out[e, r] /= m_tot
            vcom_out[e, r] /= m_tot
        for f in range(nf):
            for r in range(3):
                feet_out[e, f, r] = feet[f, r]
            dist, nx, ny, nz = _terrain_query(feet[f, 0], feet[f, 1], feet[f, 2],
                                              ground_h, wall_x)
            contact_out[e, f] = 1 if dist < foot_radius else 0


# ---------------------------------------------------------------------------
# Python-facing wrappers
# ---------------------------------------------------------------------------


def _scratch(nl):
    return (np.empty((nl, 3, 3)), np.empty((nl, 3)), np.empty((nl, 3)),
            np.empty((nl, 3)), np.empty((nl, 3)))


def mass_matrix(model: ArticulatedModel, q: np.ndarray) -> np.ndarray:
    pm = model.pack()
    nl = pm.n_links
    nd = 6 + nl - 1
    R_w, p_w, s_w, w_l, v_l = _scratch(nl)
    _fk(pm.parent, pm.axis, pm.tree_rot, pm.tree_pos,
        q[0:3], q[3:12].reshape(3, 3), q[12:], R_w, p_w, s_w)
    f_buf = np.empty((nl, 3))
    n_buf = np.empty((nl, 3))
    acc = np.empty((nl, 3))
    alp = np.empty((nl, 3))
    M = np.empty((nd, nd))
    _mass_matrix(pm.parent, pm.mass, pm.inertia, pm.com, s_w, p_w, R_w,
                 np.zeros((nl, 3)), np.zeros(nl - 1), np.zeros(3),
                 f_buf, n_buf, acc, alp, M)
    return M


def inverse_dynamics(model: ArticulatedModel, q, qd, qdd,
                     external_forces=None, gravity_on: bool = True) -> np.ndarray:
    """Generalized force for the motion (q, qd, qdd) with foot externals applied."""
    pm = model.pack()
    nl = pm.n_links
    nd = 6 + nl - 1
    R_w, p_w, s_w, w_l, v_l = _scratch(nl)
    _fk(pm.parent, pm.axis, pm.tree_rot, pm.tree_pos,
        q[0:3], q[3:12].reshape(3, 3), q[12:], R_w, p_w, s_w)
    _velocities(pm.parent, s_w, p_w, qd[0:3], qd[3:6], qd[6:], w_l, v_l)
    f_buf = np.empty((nl, 3))
    n_buf = np.empty((nl, 3))
    acc = np.empty((nl, 3))
    alp = np.empty((nl, 3))
    tau = np.empty(nd)
    g = pm.gravity if gravity_on else np.zeros(3)
    _rnea(pm.parent, pm.mass, pm.inertia, pm.com, s_w, p_w, R_w, w_l, qd[6:],
          qdd[0:3], qdd[3:6], qdd[6:], g, f_buf, n_buf, acc, alp, tau)
    if external_forces is not None:
        feet = np.empty((pm.foot_link.shape[0], 3))
        vfeet = np.empty_like(feet)
        _foot_state(pm.parent, pm.foot_link, pm.foot_offset, p_w, R_w, w_l, v_l,
                    feet, vfeet)
        from .kinematics import foot_jacobian

        for f, force in enumerate(np.asarray(external_forces, dtype=float)):
            tau -= foot_jacobian(model, q, f) .T @ force
    return tau


def forward_dynamics(model: ArticulatedModel, q, qd, tau,
                     external_forces=None) -> np.ndarray:
    """Solve M(q) qdd + h(q, qd) = tau + sum J_f^T f_ext,f.

    tau is the full generalized-force vector; its six base entries must be
    zero for an unactuated floating base.
    """
    M = mass_matrix(model, q)
    bias = inverse_dynamics(model, q, qd, np.zeros(len(tau)), external_forces)
    try:
        return np.linalg.solve(M, np.asarray(tau, dtype=float) - bias)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError("singular mass matrix") from exc


def convert_actions(model: ArticulatedModel, q, qd, grf, residual_targets,
                    swing_flags, contacts=None) -> np.ndarray:
    """Hybrid action to 12 joint torques: Jacobian-transpose stance forces,
    task-space PD (Kp=500, Kd=5, zero velocity reference) for swing feet.

    A stance-flagged foot that is not in contact gets zero torque. Torques
    are clamped to the model's per-joint limit.
    """
    from .kinematics import foot_jacobian, forward_kinematics

    _, _, feet = forward_kinematics(model, q)
    tau = np.zeros(model.n_joints)
    for f in range(4):
        J = foot_jacobian(model, q, f)
        cols = slice(6 + 3 * f, 6 + 3 * f + 3)
        if swing_flags[f]:
            v_foot = J @ qd
            force = SWING_KP * (residual_targets[f] - feet[f]) - SWING_KD * v_foot
        elif contacts is None or contacts[f]:
            force = np.asarray(grf[f], dtype=float)
        else:
            force = np.zeros(3)
        tau[3 * f: 3 * f + 3] = J[:, cols].T @ force
    return np.clip(tau, -model.torque_limit, model.torque_limit)


def fullbody_step(model: ArticulatedModel, q, qd, torques,
                  contact_params: ContactParams, dt: float,
                  ground_height: float = 0.0, wall_x: float | None = None,
                  n_substeps: int = 1, disturbance=None):
    """Single-environment stepping with fixed joint torques.

    Returns (q', qd', fault flag, contact flags). The batched training path
    uses step_batch directly.
    """
    pm = model.pack()
    q = np.asarray(q, dtype=float)[None].copy()
    qd = np.asarray(qd, dtype=float)[None].copy()
    fault = np.zeros(1, dtype=np.uint8)
    nf = pm.foot_link.shape[0]
    tau_fixed = np.asarray(torques, dtype=float)[None]
    zeros4 = np.zeros((1, nf, 3))
    flags = np.zeros((1, nf), dtype=np.bool_)
    wrench = np.zeros((1, 6)) if disturbance is None else np.asarray(disturbance, float)[None]
    feet_out = np.zeros((1, nf, 3))
    contact_out = np.zeros((1, nf), dtype=np.uint8)
    com_out = np.zeros((1, 3))
    vcom_out = np.zeros((1, 3))
    tau_out = np.zeros((1, model.n_joints))
    step_batch(pm.parent, pm.axis, pm.tree_rot, pm.tree_pos, pm.mass, pm.inertia,
               pm.com, pm.foot_link, pm.foot_offset, pm.foot_radius, pm.torque_limit,
               pm.gravity, pm.trunk_collision_height, pm.knee_collision_height,
               ground_height, np.nan if wall_x is None else float(wall_x),
               contact_params.k_n, contact_params.d_n, contact_params.mu,
               contact_params.v_slip,
               q, qd, fault, 0, tau_fixed, zeros4, zeros4, flags, wrench,
               float(dt), int(n_substeps),
               feet_out, contact_out, com_out, vcom_out, tau_out)
    return q[0], qd[0], int(fault[0]), contact_out[0].astype(bool)
