"""Task-level vectorized environments for both simulation stages.

Shared responsibilities: map raw policy actions to clipped physical actions,
generate nominal swing targets, evaluate rewards, manage episode boundaries,
and expose the quantities observations are assembled from. The SRB variant
wraps the lumped-body integrator; the full-body variant wraps the articulated
kernels and converts actions to joint torques inside them.
"""

from __future__ import annotations

import numpy as np

from . import tasks as T
from .homotopy import interpolate_model, timestep_schedule
from .rigid_body import dynamics as dyn
from .rigid_body.model import ArticulatedModel, ContactParams, nominal_composite
from .srb_env import (
    CONTROL_RATE, DT_NOMINAL, GRF_BOX_FACTOR, RESIDUAL_BOX, RESIDUAL_SCALE,
    SRBEnvBatch, SRBModel, clip_friction_cone, clip_workspace,
)
from .terrain import Terrain

_EPS_T = 1e-9


class TaskEnv:
    """Common machinery; subclasses implement the dynamics advance."""

    def __init__(self, task: T.MotionTask, n_envs: int, rng_streams,
                 control_rate: float = CONTROL_RATE):
        self.task = task
        self.n = n_envs
        self.control_dt = 1.0 / control_rate
        self.rngs = rng_streams            # one Generator per env, commands only
        self.commands = np.zeros((n_envs, 3))
        self.terrain = Terrain(ground_height=task.ground_height, wall_x=task.wall_x)
        self.t = np.zeros(n_envs)
        self.fault = np.zeros(n_envs, dtype=np.uint8)
        self._landing_start = task.plan.landing_start()
        self.episode_steps = int(round(task.duration * control_rate))

    # -- episode management -------------------------------------------------

    def _sample_commands(self, idx) -> None:
        if self.task.commands is None:
            return
        for e in idx:
            self.commands[e] = self.task.commands.sample(self.rngs[e], 1)[0]

    def reset_all(self) -> None:
        self.reset_envs(np.ones(self.n, dtype=bool))

    def reset_envs(self, mask: np.ndarray) -> None:
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return
        self._reset_dynamics(idx)
        self.t[idx] = 0.0
        self.fault[idx] = 0
        self._sample_commands(idx)

    # -- action pipeline ----------------------------------------------------

    grf_scale_factor = 0.25

    @property
    def grf_scale(self) -> float:
        return self.grf_scale_factor * self.total_weight

    def _physical_action(self, raw: np.ndarray, swing: np.ndarray):
        """Affine map to physical units followed by the box clips.

        The z bias spreads the body weight over the feet the plan currently
        keeps in stance, so the zero action is weight support at all times.
        """
        grf = raw[:, :12].reshape(self.n, 4, 3) * self.grf_scale
        n_stance = np.maximum((~swing).sum(axis=1), 1)
        grf[..., 2] += self.total_weight / n_stance[:, None]
        box = GRF_BOX_FACTOR * self.total_weight
        np.clip(grf, -box, box, out=grf)
        residual = raw[:, 12:].reshape(self.n, 4, 3) * RESIDUAL_SCALE
        np.clip(residual, -RESIDUAL_BOX, RESIDUAL_BOX, out=residual)
        return grf, residual

    def _swing_context(self, query) -> T.SwingContext:
        p, R, v, feet = self._srb_view()
        keyframe_feet = None
        if self.task.swing.mode == "wall_blend":
            keyframe_feet = T.keyframe_foot_targets(
                self.task.keyframes, self.t, self.hip_offsets_com,
                self.task.ground_height, self.task.wall_x)
        v_cmd, _ = self.world_commands()
        return T.SwingContext(
            p=p, R=R, v=v, feet=feet, hip_offsets=self.hip_offsets_com,
            swing_phase=query.swing_phase, phase=query.phase, v_cmd=v_cmd,
            stance_duration=(self.task.plan.stance_duration if self.task.plan.periodic else 0.2),
            ground_height=self.task.ground_height, keyframe_feet=keyframe_feet,
        )

    def prepare_action(self, raw: np.ndarray, query):
        """Clipped stance forces and clipped world swing targets."""
        grf, residual = self._physical_action(raw, query.swing)
        p, R, v, feet = self._srb_view()
        nominal = T.nominal_swing_targets(self.task.swing, self._swing_context(query))
        targets = nominal + residual
        hips = p[:, None, :] + np.einsum("nij,fj->nfi", R, self.hip_offsets_clip)
        targets = clip_workspace(targets, hips, self.workspace_radius,
                                 self.task.ground_height, self.foot_radius)
        _, normals = self.terrain.signed_distance(feet)
        grf = clip_friction_cone(grf, self.mu, normals)
        return grf, residual, targets

    # -- rewards ------------------------------------------------------------

    def world_commands(self):
        """Linear command rotated from the heading frame into the world.

        Commands are issued in the robot's heading frame (yaw is unobservable
        from the proprioceptive state); rewards compare world quantities.
        """
        p, R, _, _ = self._srb_view()
        cy = R[:, 0, 0]
        sy = R[:, 1, 0]
        norm = np.hypot(cy, sy)
        norm = np.where(norm < 1e-9, 1.0, norm)
        cy, sy = cy / norm, sy / norm
        v_cmd = np.column_stack([
            cy * self.commands[:, 0] - sy * self.commands[:, 1],
            sy * self.commands[:, 0] + cy * self.commands[:, 1],
            np.zeros(self.n),
        ])
        w_cmd = np.column_stack([np.zeros((self.n, 2)), self.commands[:, 2]])
        return v_cmd, w_cmd

    def _reward_context(self, query, grf, residual) -> T.RewardContext:
        p, R, v, feet = self._srb_view()
        w = self._angular_velocity()
        v_cmd, w_cmd = self.world_commands()
        ctx = T.RewardContext(
            t=self.t, p=p, v=v, R=R, w=w, grf=grf, residual=residual,
            swing=query.swing, v_cmd=v_cmd, w_cmd=w_cmd,
            landing=self.t >= self._landing_start,
        )
        if self.task.keyframes is not None:
            p_t, R_t, mask = self.task.keyframes.targets_at(self.t)
            ctx.p_target, ctx.R_target, ctx.R_mask = p_t, R_t, mask
        return ctx

    # -- stepping -----------------------------------------------------------

    def step(self, raw_actions: np.ndarray):
        """One control step for every env; returns (reward, done, breakdown)."""
        raw_actions = np.asarray(raw_actions, dtype=np.float64)
        query = T.plan_query(self.task.plan, self.t)
        grf, residual, targets = self.prepare_action(raw_actions, query)
        self._advance(grf, targets, query.swing)
        self.t += self.control_dt
        ctx = self._reward_context(query, grf, residual)
        reward, breakdown = self.task.rewards.evaluate(ctx)
        faulted = self.fault != 0
        reward = np.where(faulted, 0.0, reward)
        done = faulted | (self.t >= self.task.duration - _EPS_T)
        self.reset_envs(done)
        return reward, done, breakdown

    # -- observation support -------------------------------------------------

    def observation_parts(self) -> dict:
        p, R, v, feet = self._srb_view()
        w = self._angular_velocity()
        g_hat = self._gravity_unit
        query = T.plan_query(self.task.plan, self.t)
        return {
            "gravity_b": np.einsum("nji,j->ni", R, g_hat),
            "v_true_b": np.einsum("nji,nj->ni", R, v),
            "w_b": np.einsum("nji,nj->ni", R, w),
            "feet_b": np.einsum("nji,nfj->nfi", R, feet - p[:, None, :]),
            "contacts_true": self._contacts(),
            "phase": query.phase,
        }

    # -- subclass hooks -------------------------------------------------------

    def _reset_dynamics(self, idx):
        raise NotImplementedError

    def _advance(self, grf, targets, swing):
        raise NotImplementedError

    def _srb_view(self):
        """(COM position, base rotation, COM velocity, world feet)."""
        raise NotImplementedError

    def _angular_velocity(self):
        raise NotImplementedError

    def _contacts(self):
        raise NotImplementedError


class SRBTaskEnv(TaskEnv):
    """Pretraining environment on the lumped single-rigid-body model."""

    def __init__(self, task: T.MotionTask, model: ArticulatedModel, n_envs: int,
                 rng_streams, control_rate: float = CONTROL_RATE,
                 dt: float = DT_NOMINAL):
        super().__init__(task, n_envs, rng_streams, control_rate)
        self.srb_model = SRBModel.from_articulated(model)
        n_sub = max(1, int(round(self.control_dt / dt)))
        self.sim = SRBEnvBatch(n_envs, self.srb_model, self.terrain,
                               dt=self.control_dt / n_sub, n_substeps=n_sub)
        self.fault = self.sim.fault    # kernel writes faults through this view
        _, _, com = nominal_composite(model)
        self._com_height = model.nominal_base_height + com[2]
        self.hip_offsets_com = self.srb_model.hip_offsets
        self.hip_offsets_clip = self.srb_model.hip_offsets
        self.total_weight = self.srb_model.weight
        self.workspace_radius = self.srb_model.workspace_radius
        self.foot_radius = self.srb_model.foot_radius
        self.mu = self.srb_model.mu
        self._gravity_unit = self.srb_model.gravity / np.linalg.norm(self.srb_model.gravity)
        self.joint_dim = 12

    def _reset_dynamics(self, idx):
        mask = np.zeros(self.n, dtype=bool)
        mask[idx] = True
        self.sim.reset_envs(mask, self._com_height)

    def _advance(self, grf, targets, swing):
        self.sim.step(grf, targets, swing)

    def _srb_view(self):
        return self.sim.p, self.sim.R, self.sim.v, self.sim.feet

    def _angular_velocity(self):
        return self.sim.w

    def _contacts(self):
        return self.sim.contacts()

    # SRB has no joints; history frames are zero-padded.
    def proprioceptive_frame(self) -> np.ndarray:
        return np.zeros((self.n, 36))


class FullBodyTaskEnv(TaskEnv):
    """Articulated environment; model may be a homotopy-interpolated instance.

    Joint torques come from the held hybrid action inside the step kernel:
    Jacobian-transpose stance forces and task-space PD swing tracking.
    """

    def __init__(self, task: T.MotionTask, model_full: ArticulatedModel, n_envs: int,
                 rng_streams, lam: float = 1.0, control_rate: float = CONTROL_RATE,
                 dt_nominal: float = DT_NOMINAL, dt_min_fraction: float = 0.25,
                 contact_params: ContactParams | None = None,
                 disturbance: np.ndarray | None = None):
        super().__init__(task, n_envs, rng_streams, control_rate)
        self.model_full = model_full
        self.dt_nominal = dt_nominal
        self.dt_min_fraction = dt_min_fraction
        self.contact = contact_params or ContactParams(mu=model_full.mu)
        self.disturbance = np.zeros((n_envs, 6)) if disturbance is None else disturbance
        m, I, com = nominal_composite(model_full)
        self.total_weight = m * float(np.linalg.norm(model_full.gravity))
        self.hip_offsets_com = model_full.hip_offsets - com
        self.hip_offsets_clip = model_full.hip_offsets - com
        self.workspace_radius = model_full.workspace_radius
        self.foot_radius = model_full.foot_radius
        self.mu = model_full.mu
        self._gravity_unit = model_full.gravity / np.linalg.norm(model_full.gravity)
        self._nominal_com = com
        self.joint_dim = model_full.n_joints

        self.q = np.zeros((n_envs, 12 + model_full.n_joints))
        self.qd = np.zeros((n_envs, 6 + model_full.n_joints))
        self.feet = np.zeros((n_envs, 4, 3))
        self.contact_flags = np.zeros((n_envs, 4), dtype=np.uint8)
        self.com = np.zeros((n_envs, 3))
        self.vcom = np.zeros((n_envs, 3))
        self.last_tau = np.zeros((n_envs, model_full.n_joints))
        self._tau_unused = np.zeros((n_envs, model_full.n_joints))
        self.set_lambda(lam)

    def set_lambda(self, lam: float) -> None:
        """Re-interpolate the model and the timestep schedule for a new lambda."""
        self.lam = float(lam)
        self.model = interpolate_model(self.model_full, self.lam) if self.lam < 1.0 else self.model_full
        self.packed = self.model.pack()
        dt_target = timestep_schedule(self.lam, self.dt_nominal, self.dt_min_fraction)
        self.n_substeps = max(1, int(np.ceil(self.control_dt / dt_target - 1e-12)))
        self.dt = self.control_dt / self.n_substeps

    def _reset_dynamics(self, idx):
        q0 = np.zeros(12 + self.model.n_joints)
        # Feet rest with the static contact deflection taken up.
        settle = self.total_weight / (4.0 * self.contact.k_n)
        q0[2] = self.model.nominal_base_height + self.model.foot_radius - settle
        q0[3:12] = np.eye(3).reshape(-1)
        q0[12:] = self.model.nominal_joints
        self.q[idx] = q0
        self.qd[idx] = 0.0
        self.last_tau[idx] = 0.0
        self._refresh_kinematics(idx)

    def _refresh_kinematics(self, idx) -> None:
        from .rigid_body.kinematics import forward_kinematics, system_com

        for e in idx:
            _, _, feet = forward_kinematics(self.model, self.q[e])
            self.feet[e] = feet
            c, vc = system_com(self.model, self.q[e], self.qd[e])
            self.com[e] = c
            self.vcom[e] = vc
            self.contact_flags[e] = self.terrain.in_contact(feet, self.model.foot_radius)

    def _advance(self, grf, targets, swing):
        pm = self.packed
        dyn.step_batch(
            pm.parent, pm.axis, pm.tree_rot, pm.tree_pos, pm.mass, pm.inertia,
            pm.com, pm.foot_link, pm.foot_offset, pm.foot_radius, pm.torque_limit,
            pm.gravity, pm.trunk_collision_height, pm.knee_collision_height,
            self.terrain.ground_height,
            np.nan if self.terrain.wall_x is None else float(self.terrain.wall_x),
            self.contact.k_n, self.contact.d_n, self.contact.mu, self.contact.v_slip,
            self.q, self.qd, self.fault,
            1, self._tau_unused, np.ascontiguousarray(grf), np.ascontiguousarray(targets),
            np.ascontiguousarray(swing), self.disturbance,
            self.dt, self.n_substeps,
            self.feet, self.contact_flags, self.com, self.vcom, self.last_tau)

    def _srb_view(self):
        R = self.q[:, 3:12].reshape(self.n, 3, 3)
        return self.com, R, self.vcom, self.feet

    def _angular_velocity(self):
        return self.qd[:, 3:6]

    def _contacts(self):
        return self.contact_flags.astype(bool)

    def proprioceptive_frame(self) -> np.ndarray:
        return np.concatenate([self.q[:, 12:], self.qd[:, 6:], self.last_tau], axis=1)


def make_env(stage: str, task: T.MotionTask, model: ArticulatedModel, n_envs: int,
             rng_streams, lam: float = 1.0, **kwargs) -> TaskEnv:
    if stage == "srb":
        return SRBTaskEnv(task, model, n_envs, rng_streams, **kwargs)
    return FullBodyTaskEnv(task, model, n_envs, rng_streams, lam=lam, **kwargs)
