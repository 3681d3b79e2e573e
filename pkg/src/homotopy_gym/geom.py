"""Shared 3-D math: SO(3) maps, quadratic Bezier curves, composite inertia."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Unit axes used for rotation targets and flip axes.
X_AXIS = np.array([1.0, 0.0, 0.0])
Y_AXIS = np.array([0.0, 1.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])

# Below this angle the Rodrigues coefficients are evaluated by Taylor series.
SMALL_ANGLE = 1e-8

# Re-orthonormalize integrated rotations once drift exceeds this.
ORTHO_DRIFT_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for the axis-angle vector w (Rodrigues formula)."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < SMALL_ANGLE * SMALL_ANGLE:
        # 2nd-order Taylor; the truncation error is < theta^3 ~ 1e-24.
        return np.eye(3) + K + 0.5 * (K @ K)
    theta = np.sqrt(theta2)
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta2) * (K @ K)


def rotation_defect(R: np.ndarray) -> float:
    """Frobenius norm of R^T R - I."""
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def is_rotation(R: np.ndarray, tol: float = 1e-8) -> bool:
    return rotation_defect(R) < tol and abs(np.linalg.det(R) - 1.0) < tol


def reorthonormalize(R: np.ndarray) -> np.ndarray:
    """Gram-Schmidt the rows of R; identity when drift is below ORTHO_DRIFT_TOL."""
    if rotation_defect(R) <= ORTHO_DRIFT_TOL:
        return R
    a = R[0] / np.linalg.norm(R[0])
    b = R[1] - (R[1] @ a) * a
    b = b / np.linalg.norm(b)
    c = np.cross(a, b)
    return np.stack([a, b, c])


@dataclass(frozen=True)
class BezierQuad:
    """Quadratic Bezier curve through control points P0, P1, P2."""

    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray

    def eval(self, s) -> np.ndarray:
        return bezier_eval(self, s)


def bezier_eval(curve: BezierQuad, s) -> np.ndarray:
    """Evaluate the curve at s in [0, 1]; s outside the interval is clamped.

    Broadcasts: control points may carry leading batch dimensions, and s may
    be a scalar or an array matching those dimensions.
    """
    return bezier_point(curve.p0, curve.p1, curve.p2, s)


def bezier_point(p0, p1, p2, s) -> np.ndarray:
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    s = s[..., None] if np.ndim(s) else s
    u = 1.0 - s
    return u * u * np.asarray(p0) + 2.0 * s * u * np.asarray(p1) + s * s * np.asarray(p2)


def composite_inertia(links, about: np.ndarray | None = None):
    """Aggregate (mass, inertia about own COM, COM position) tuples.

    Returns (total mass, inertia tensor, COM). The tensor is taken about the
    composite COM by default, or about the optional `about` point, using the
    parallel-axis theorem either way.
    """
    links = list(links)
    if not links:
        raise ValueError("composite_inertia needs at least one link")
    masses = np.array([float(m) for m, _, _ in links])
    if np.any(masses <= 0.0):
        raise ValueError("link masses must be positive")
    coms = np.stack([np.asarray(c, dtype=float) for _, _, c in links])
    m_total = float(masses.sum())
    com = (masses[:, None] * coms).sum(axis=0) / m_total

    ref = com if about is None else np.asarray(about, dtype=float)
    inertia = np.zeros((3, 3))
    for (m, I_link, _), c in zip(links, coms):
        d = c - ref
        inertia += np.asarray(I_link, dtype=float) + float(m) * ((d @ d) * np.eye(3) - np.outer(d, d))
    return m_total, inertia, com
