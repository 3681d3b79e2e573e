"""Single-rigid-body pretraining environment.

The robot is one floating body with lumped mass/inertia; feet are massless
points. Stance feet pin to the world and exert policy-chosen ground reaction
forces (clipped to the friction cone); swing feet track clipped targets
kinematically. Dynamics integrate with semi-implicit Euler and an SO(3)
exponential update at dt_nominal = 2 ms, five substeps per 100 Hz action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .geom import reorthonormalize, so3_exp
from .terrain import Terrain

CONTROL_RATE = 100.0
DT_NOMINAL = 2e-3
SWING_FOOT_RATE = 5.0   # m/s cap on kinematic swing-foot motion

# Raw policy actions map affinely to physical units; the z bias carries a
# quarter of the body weight so the zero action is a plausible stance force.
GRF_BOX_FACTOR = 3.0        # box clip at +-3 m g per axis
RESIDUAL_SCALE = 0.05       # m per raw unit
RESIDUAL_BOX = 0.15         # m per axis


@dataclass(frozen=True)
class SRBModel:
    """Lumped-body model: composite mass/inertia plus virtual-leg geometry."""

    m: float
    I_b: np.ndarray               # (3, 3) body frame, about the COM
    hip_offsets: np.ndarray       # (4, 3) base frame, relative to the COM
    foot_radius: float = 0.02
    workspace_radius: float = 0.35
    mu: float = 0.6
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        if self.m <= 0.0 or np.min(np.linalg.eigvalsh(self.I_b)) <= 0.0:
            raise ValueError("SRB mass and inertia must be positive definite")
        if not self.workspace_radius > self.foot_radius > 0.0:
            raise ValueError("workspace_radius > foot_radius > 0 required")
        if self.mu <= 0.0:
            raise ValueError("friction coefficient must be positive")

    @property
    def weight(self) -> float:
        return self.m * float(np.linalg.norm(self.gravity))

    @classmethod
    def from_articulated(cls, model) -> "SRBModel":
        """Composite properties of the full robot in its nominal standing pose."""
        from .rigid_body.model import nominal_composite

        m, I_b, com = nominal_composite(model)
        return cls(
            m=m, I_b=I_b, hip_offsets=model.hip_offsets - com,
            foot_radius=model.foot_radius, workspace_radius=model.workspace_radius,
            mu=model.mu, gravity=model.gravity.copy(),
        )


@dataclass
class SRBState:
    p: np.ndarray                 # (3,) COM position
    v: np.ndarray                 # (3,)
    R: np.ndarray                 # (3, 3)
    w: np.ndarray                 # (3,) world-frame angular velocity
    feet: np.ndarray              # (4, 3) world foot positions
    t: float = 0.0


@dataclass
class SRBAction:
    grf: np.ndarray               # (4, 3) N, stance feet only
    residual: np.ndarray          # (4, 3) m, swing feet only


def clip_friction_cone(f: np.ndarray, mu: float, ground_normal: np.ndarray) -> np.ndarray:
    """Clamp the normal component to >= 0 and the tangential magnitude to
    mu times the normal, preserving the tangential direction.

    Broadcasts over leading dimensions of f and ground_normal.
    """
    f = np.asarray(f, dtype=float)
    n = np.asarray(ground_normal, dtype=float)
    fn = np.maximum((f * n).sum(axis=-1, keepdims=True), 0.0)
    ft = f - (f * n).sum(axis=-1, keepdims=True) * n
    norm = np.linalg.norm(ft, axis=-1, keepdims=True)
    limit = mu * fn
    scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
    return fn * n + ft * scale


def clip_workspace(target, hip_world, r_ws: float, ground_height: float,
                   foot_radius: float) -> np.ndarray:
    """Project targets outside the hip-centered sphere back onto it, then
    clamp z to the ground height (foot centers may touch the ground)."""
    target = np.asarray(target, dtype=float)
    hip = np.asarray(hip_world, dtype=float)
    d = target - hip
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    scale = np.where(norm > r_ws, r_ws / np.maximum(norm, 1e-300), 1.0)
    out = hip + d * scale
    out[..., 2] = np.maximum(out[..., 2], ground_height)
    return out


@njit(cache=True)
def _solve33(A, b, x):
    # Cramer's rule; A is symmetric positive definite in practice.
    a, d, g = A[0, 0], A[1, 0], A[2, 0]
    b1, e, h = A[0, 1], A[1, 1], A[2, 1]
    c, f, i = A[0, 2], A[1, 2], A[2, 2]
    det = a * (e * i - f * h) - b1 * (d * i - f * g) + c * (d * h - e * g)
    x[0] = (b[0] * (e * i - f * h) - b1 * (b[1] * i - f * b[2]) + c * (b[1] * h - e * b[2])) / det
    x[1] = (a * (b[1] * i - f * b[2]) - b[0] * (d * i - f * g) + c * (d * b[2] - b[1] * g)) / det
    x[2] = (a * (e * b[2] - b[1] * h) - b1 * (d * b[2] - b[1] * g) + b[0] * (d * h - e * g)) / det


@njit(cache=True)
def _srb_substeps(p, v, R, w, feet, fault, grf, targets, swing,
                  m, I_b, g, foot_radius, ground_h, wall_x,
                  dt, n_sub, swing_rate, capsize_faults):
    n_env = p.shape[0]
    for e in prange(n_env):
        if fault[e] != 0:
            continue
        I_w = np.empty((3, 3))
        T = np.empty((3, 3))
        tq = np.empty(3)
        Iw_w = np.empty(3)
        wdot = np.empty(3)
        dw = np.empty(3)
        Rn = np.empty((3, 3))
        Re = np.empty((3, 3))
        for _s in range(n_sub):
            # Net force/torque from stance feet in contact.
            fx = m * g[0]
            fy = m * g[1]
            fz = m * g[2]
            tq[0] = 0.0
            tq[1] = 0.0
            tq[2] = 0.0
            for f in range(4):
                if swing[e, f]:
                    continue
                dist = feet[e, f, 2] - ground_h
                if not np.isnan(wall_x):
                    wd = wall_x - feet[e, f, 0]
                    if wd < dist:
                        dist = wd
                if dist >= foot_radius:
                    continue
                rx = feet[e, f, 0] - p[e, 0]
                ry = feet[e, f, 1] - p[e, 1]
                rz = feet[e, f, 2] - p[e, 2]
                gx = grf[e, f, 0]
                gy = grf[e, f, 1]
                gz = grf[e, f, 2]
                fx += gx
                fy += gy
                fz += gz
                tq[0] += ry * gz - rz * gy
                tq[1] += rz * gx - rx * gz
                tq[2] += rx * gy - ry * gx
            # I_w = R I_b R^T.
            for r in range(3):
                for c in range(3):
                    T[r, c] = (R[e, r, 0] * I_b[0, c] + R[e, r, 1] * I_b[1, c]
                               + R[e, r, 2] * I_b[2, c])
            for r in range(3):
                for c in range(3):
                    I_w[r, c] = T[r, 0] * R[e, c, 0] + T[r, 1] * R[e, c, 1] + T[r, 2] * R[e, c, 2]
            for r in range(3):
                Iw_w[r] = I_w[r, 0] * w[e, 0] + I_w[r, 1] * w[e, 1] + I_w[r, 2] * w[e, 2]
            tq[0] -= w[e, 1] * Iw_w[2] - w[e, 2] * Iw_w[1]
            tq[1] -= w[e, 2] * Iw_w[0] - w[e, 0] * Iw_w[2]
            tq[2] -= w[e, 0] * Iw_w[1] - w[e, 1] * Iw_w[0]
            _solve33(I_w, tq, wdot)
            # Velocities first, then positions (semi-implicit Euler).
            v[e, 0] += dt * fx / m
            v[e, 1] += dt * fy / m
            v[e, 2] += dt * fz / m
            for r in range(3):
                w[e, r] += dt * wdot[r]
                p[e, r] += dt * v[e, r]
                dw[r] = dt * w[e, r]
            # R <- exp(w dt) R with drift guard.
            theta2 = dw[0] * dw[0] + dw[1] * dw[1] + dw[2] * dw[2]
            if theta2 < 1e-16:
                Re[0, 0] = 1.0 - 0.5 * (dw[1] * dw[1] + dw[2] * dw[2])
                Re[0, 1] = -dw[2] + 0.5 * dw[0] * dw[1]
                Re[0, 2] = dw[1] + 0.5 * dw[0] * dw[2]
                Re[1, 0] = dw[2] + 0.5 * dw[0] * dw[1]
                Re[1, 1] = 1.0 - 0.5 * (dw[0] * dw[0] + dw[2] * dw[2])
                Re[1, 2] = -dw[0] + 0.5 * dw[1] * dw[2]
                Re[2, 0] = -dw[1] + 0.5 * dw[0] * dw[2]
                Re[2, 1] = dw[0] + 0.5 * dw[1] * dw[2]
                Re[2, 2] = 1.0 - 0.5 * (dw[0] * dw[0] + dw[1] * dw[1])
            else:
                theta = np.sqrt(theta2)
                ax = dw[0] / theta
                ay = dw[1] / theta
                az = dw[2] / theta
                ct = np.cos(theta)
                st = np.sin(theta)
                vt = 1.0 - ct
                Re[0, 0] = ct + ax * ax * vt
                Re[0, 1] = ax * ay * vt - az * st
                Re[0, 2] = ax * az * vt + ay * st
                Re[1, 0] = ax * ay * vt + az * st
                Re[1, 1] = ct + ay * ay * vt
                Re[1, 2] = ay * az * vt - ax * st
                Re[2, 0] = ax * az * vt - ay * st
                Re[2, 1] = ay * az * vt + ax * st
                Re[2, 2] = ct + az * az * vt
            for r in range(3):
                for c in range(3):
                    Rn[r, c] = (Re[r, 0] * R[e, 0, c] + Re[r, 1] * R[e, 1, c]
                                + Re[r, 2] * R[e, 2, c])
            for r in range(3):
                for c in range(3):
                    R[e, r, c] = Rn[r, c]
            drift = 0.0
            for i in range(3):
                for j in range(3):
                    gij = (R[e, 0, i] * R[e, 0, j] + R[e, 1, i] * R[e, 1, j]
                           + R[e, 2, i] * R[e, 2, j])
                    if i == j:
                        gij -= 1.0
                    drift += gij * gij
            if drift > 1e-18:
                n0 = np.sqrt(R[e, 0, 0] ** 2 + R[e, 0, 1] ** 2 + R[e, 0, 2] ** 2)
                for j in range(3):
                    R[e, 0, j] /= n0
                dproj = (R[e, 1, 0] * R[e, 0, 0] + R[e, 1, 1] * R[e, 0, 1]
                         + R[e, 1, 2] * R[e, 0, 2])
                for j in range(3):
                    R[e, 1, j] -= dproj * R[e, 0, j]
                n1 = np.sqrt(R[e, 1, 0] ** 2 + R[e, 1, 1] ** 2 + R[e, 1, 2] ** 2)
                for j in range(3):
                    R[e, 1, j] /= n1
                R[e, 2, 0] = R[e, 0, 1] * R[e, 1, 2] - R[e, 0, 2] * R[e, 1, 1]
                R[e, 2, 1] = R[e, 0, 2] * R[e, 1, 0] - R[e, 0, 0] * R[e, 1, 2]
                R[e, 2, 2] = R[e, 0, 0] * R[e, 1, 1] - R[e, 0, 1] * R[e, 1, 0]
            # Swing feet approach their targets with a speed cap.
            step_cap = swing_rate * dt
            for f in range(4):
                if not swing[e, f]:
                    continue
                dx = targets[e, f, 0] - feet[e, f, 0]
                dy = targets[e, f, 1] - feet[e, f, 1]
                dz = targets[e, f, 2] - feet[e, f, 2]
                dn = np.sqrt(dx * dx + dy * dy + dz * dz)
                if dn > step_cap:
                    sc = step_cap / dn
                    feet[e, f, 0] += dx * sc
                    feet[e, f, 1] += dy * sc
                    feet[e, f, 2] += dz * sc
                else:
                    feet[e, f, 0] = targets[e, f, 0]
                    feet[e, f, 1] = targets[e, f, 1]
                    feet[e, f, 2] = targets[e, f, 2]
        s = 0.0
        for r in range(3):
            s += p[e, r] + v[e, r] + w[e, r]
            for c in range(3):
                s += R[e, r, c]
        for f in range(4):
            s += feet[e, f, 0] + feet[e, f, 1] + feet[e, f, 2]
        if not np.isfinite(s):
            fault[e] = 1
        else:
            # Numerical divergence guard: flag states far beyond anything
            # physical before they overflow downstream consumers.
            for r in range(3):
                if abs(v[e, r]) > 1e3 or abs(w[e, r]) > 1e4:
                    fault[e] = 1
            # Grounded or capsized-near-ground trunk, the SRB analogue of the
            # full-body trunk-collision fault. Aerial inversion (flips) is fine.
            if capsize_faults == 1:
                height = p[e, 2] - ground_h
                if height < 0.05 or (R[e, 2, 2] < 0.0 and height < 0.15):
                    fault[e] = 2


def srb_step(state: SRBState, model: SRBModel, action: SRBAction,
             plan_phase, dt: float, terrain: Terrain | None = None,
             n_substeps: int = 1) -> SRBState:
    """Advance one SRB state by n_substeps of size dt.

    plan_phase is the per-foot stance(False)/swing(True) flag array; the
    action must already be clipped (friction cone and workspace).
    Deterministic: identical inputs produce bitwise-identical outputs.
    """
    terrain = terrain or Terrain()
    p = state.p[None].copy()
    v = state.v[None].copy()
    R = state.R[None].copy()
    w = state.w[None].copy()
    feet = state.feet[None].copy()
    fault = np.zeros(1, dtype=np.uint8)
    swing = np.asarray(plan_phase, dtype=bool)[None]
    _srb_substeps(p, v, R, w, feet, fault,
                  action.grf[None].astype(float), action.residual[None].astype(float),
                  swing, model.m, model.I_b, model.gravity, model.foot_radius,
                  terrain.ground_height,
                  np.nan if terrain.wall_x is None else float(terrain.wall_x),
                  float(dt), int(n_substeps), SWING_FOOT_RATE, 0)
    if fault[0]:
        raise FloatingPointError("SRB state became non-finite")
    return SRBState(p=p[0], v=v[0], R=R[0], w=w[0], feet=feet[0],
                    t=state.t + dt * n_substeps)


class SRBEnvBatch:
    """Vectorized SRB environments sharing one model and terrain.

    swing targets for srb_step(residual) are interpreted as absolute world
    targets here; the task-level environment composes nominal swing plus
    residual before clipping.
    """

    def __init__(self, n_envs: int, model: SRBModel, terrain: Terrain | None = None,
                 dt: float = DT_NOMINAL, n_substeps: int = 5):
        self.n = n_envs
        self.model = model
        self.terrain = terrain or Terrain()
        self.dt = dt
        self.n_substeps = n_substeps
        self.p = np.zeros((n_envs, 3))
        self.v = np.zeros((n_envs, 3))
        self.R = np.tile(np.eye(3), (n_envs, 1, 1))
        self.w = np.zeros((n_envs, 3))
        self.feet = np.zeros((n_envs, 4, 3))
        self.t = np.zeros(n_envs)
        self.fault = np.zeros(n_envs, dtype=np.uint8)
        self._wall = np.nan if self.terrain.wall_x is None else float(self.terrain.wall_x)

    def reset_envs(self, mask: np.ndarray, base_height: float) -> None:
        """Reset masked environments to the nominal stance."""
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return
        self.p[idx] = 0.0
        self.p[idx, 2] = base_height
        self.v[idx] = 0.0
        self.R[idx] = np.eye(3)
        self.w[idx] = 0.0
        feet = np.zeros((idx.size, 4, 3))
        feet[:, :, 0] = self.model.hip_offsets[:, 0]
        feet[:, :, 1] = self.model.hip_offsets[:, 1]
        feet[:, :, 2] = self.terrain.ground_height
        self.feet[idx] = feet
        self.t[idx] = 0.0
        self.fault[idx] = 0

    def contacts(self) -> np.ndarray:
        return self.terrain.in_contact(self.feet, self.model.foot_radius)

    def hips_world(self) -> np.ndarray:
        return self.p[:, None, :] + np.einsum("nij,fj->nfi", self.R, self.model.hip_offsets)

    capsize_faults = True

    def step(self, grf: np.ndarray, targets: np.ndarray, swing: np.ndarray) -> None:
        """Apply pre-clipped stance forces and swing targets for one control period."""
        _srb_substeps(self.p, self.v, self.R, self.w, self.feet, self.fault,
                      grf, targets, swing, self.model.m, self.model.I_b,
                      self.model.gravity, self.model.foot_radius,
                      self.terrain.ground_height, self._wall,
                      self.dt, self.n_substeps, SWING_FOOT_RATE,
                      1 if self.capsize_faults else 0)
        self.t += self.dt * self.n_substeps
