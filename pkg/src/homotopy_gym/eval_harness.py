"""Evaluation protocols: convergence metrics, normalized returns, the
disturbance-robustness grid, and trajectory export for plotting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .envs import FullBodyTaskEnv, SRBTaskEnv, make_env
from .rigid_body.model import ArticulatedModel
from .tasks import MotionTask


# ---------------------------------------------------------------------------
# Training-curve metrics
# ---------------------------------------------------------------------------


def smoothed(series: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; the window expands until `window` samples exist."""
    series = np.asarray(series, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(series)])
    out = np.empty(len(series))
    for i in range(len(series)):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out

def converged_iteration(returns, window: int = 100):
    """First iteration whose smoothed return reaches 99% of the final mean.

    The final mean is the average of the last `window` iterations. Returns
    None when the series is shorter than the window.
    """
    returns = np.asarray(returns, dtype=float)
    if len(returns) <= window:
        return None
    final_mean = returns[-window:].mean()
    smooth = smoothed(returns, window)
    if final_mean >= 0:
        hits = np.flatnonzero(smooth >= 0.99 * final_mean)
    else:
        hits = np.flatnonzero(smooth >= final_mean / 0.99)
    return int(hits[0]) if len(hits) else None


def normalized_return(runs_per_method: dict):
    """Normalize each method's final returns by the best method mean per task.

    runs_per_method maps method name to a list of final mean returns (one per
    seed). Returns {method: {"mean", "min", "max"}} with the best method's
    mean pinned at 1.0.
    """
    means = {m: float(np.mean(v)) for m, v in runs_per_method.items() if len(v)}
    if not means:
        return {}
    best = max(means.values())
    if best == 0.0:
        best = 1.0
    out = {}
    for method, vals in runs_per_method.items():
        vals = np.asarray(vals, dtype=float) / best
        out[method] = {"mean": float(vals.mean()), "min": float(vals.min()),
                       "max": float(vals.max())}
    return out


# ---------------------------------------------------------------------------
# Policy evaluation machinery
# ---------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    success: np.ndarray           # (n_envs,) bool
    returns: np.ndarray           # (n_envs,)
    term_means: dict
    faults: np.ndarray


@dataclass
class EvalSetup:
    """Policy plus the environment it should be evaluated in."""

    policy: nets.GaussianPolicy
    estimator: nets.MlpParams
    stage: str
    task: MotionTask
    model: ArticulatedModel

    @classmethod
    def from_checkpoint(cls, payload: dict, task: MotionTask,
                        model: ArticulatedModel) -> "EvalSetup":
        policy = nets.GaussianPolicy(net=nets.mlp_from_payload(payload["policy"]),
                                     log_std=payload["log_std"])
        estimator = nets.mlp_from_payload(payload["estimator"])
        stage = payload.get("config", {}).get("stage", "fullbody")
        return cls(policy=policy, estimator=estimator, stage=stage, task=task,
                   model=model)

    def make_env(self, n_envs: int, seed: int, disturbance=None):
        streams = [np.random.default_rng(s)
                   for s in np.random.SeedSequence(seed).spawn(n_envs)]
        kwargs = {}
        if self.stage != "srb":
            kwargs["disturbance"] = disturbance
        env = make_env("srb" if self.stage == "srb" else "fullbody",
                       self.task, self.model, n_envs, streams, lam=1.0, **kwargs)
        return env


def run_episode(setup: EvalSetup, env, commands: np.ndarray | None = None,
                recorder=None) -> EpisodeResult:
    """One deterministic-policy episode across the env batch."""
    env.reset_all()
    if commands is not None and setup.task.has_commands:
        env.commands[:] = commands[: env.n]
    n = env.n
    history = nets.HistoryBuffer(n)
    returns = np.zeros(n)
    vel_err_sum = np.zeros(n)
    term_sums: dict = {}
    ever_fault = np.zeros(n, dtype=bool)
    for _step in range(env.episode_steps):
        parts = env.observation_parts()
        if setup.stage == "srb":
            v_obs = parts["v_true_b"]
            c_obs = parts["contacts_true"].astype(float)
        else:
            ang = 2.0 * np.pi * parts["phase"]
            extra = np.concatenate([
                parts["gravity_b"], parts["w_b"], parts["feet_b"].reshape(n, 12),
                np.sin(ang)[:, None], np.cos(ang)[:, None], env.commands], axis=1)
            v_hat, c_prob, _ = nets.estimator_forward(setup.estimator, history.flat(), extra)
            v_obs = v_hat
            c_obs = nets.contact_from_probability(c_prob).astype(float)
        obs27 = nets.build_observation(parts["gravity_b"], v_obs, parts["w_b"],
                                       parts["feet_b"], c_obs, parts["phase"])
        policy_in = np.concatenate([obs27, env.commands], axis=1)
        actions = nets.policy_mean(setup.policy, policy_in)
        if recorder is not None:
            recorder.before_step(env, actions)
        reward, done, breakdown = env.step(actions)
        if recorder is not None:
            recorder.after_step(env, reward, breakdown)
        returns += reward
        p, R, v, _ = env._srb_view()
        vel_err_sum += np.linalg.norm(v - env.commands * [1.0, 1.0, 0.0], axis=1)
        for k, vals in breakdown.items():
            term_sums[k] = term_sums.get(k, 0.0) + vals
        ever_fault |= env.fault != 0
        if setup.stage != "srb":
            history.push(env.proprioceptive_frame())
            history.reset(done)
        if commands is not None and setup.task.has_commands:
            env.commands[:] = commands[: env.n]
    p, R, v, _ = env._srb_view()
    success = ~ever_fault
    success &= p[:, 2] > setup.task.success.min_height
    success &= R[:, 2, 2] > setup.task.success.min_upright
    if setup.task.success.max_vel_error is not None:
        success &= vel_err_sum / env.episode_steps < setup.task.success.max_vel_error
    return EpisodeResult(
        success=success, returns=returns,
        term_means={k: v / env.episode_steps for k, v in term_sums.items()},
        faults=ever_fault,
    )


# ---------------------------------------------------------------------------
# Disturbance robustness
# ---------------------------------------------------------------------------


@dataclass
class RobustnessGrid:
    force_norms: np.ndarray
    torque_norms: np.ndarray
    success: np.ndarray           # (len(force), len(torque)) fractions
    n_directions: int


def _sphere_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def robustness_grid(setup: EvalSetup, force_norms, torque_norms,
                    n_directions: int = 100, seed: int = 0) -> RobustnessGrid:
    """Success fraction per (force, torque) magnitude pair.

    Each cell runs n_directions episodes in parallel, one per sampled
    direction pair, with the constant wrench applied at the trunk COM for the
    whole trajectory. Deterministic for a fixed seed.
    """
    if setup.stage == "srb":
        raise ValueError("robustness evaluation runs in the full-body environment")
    force_norms = np.asarray(force_norms, dtype=float)
    torque_norms = np.asarray(torque_norms, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD157]))
    disturbance = np.zeros((n_directions, 6))
    env = setup.make_env(n_directions, seed, disturbance=disturbance)
    commands = None
    if setup.task.has_commands:
        cmd_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        commands = setup.task.commands.sample(cmd_rng, n_directions)
    success = np.zeros((len(force_norms), len(torque_norms)))
    for i, fn in enumerate(force_norms):
        for j, tn in enumerate(torque_norms):
            f_dir = _sphere_directions(rng, n_directions)
            t_dir = _sphere_directions(rng, n_directions)
            disturbance[:, 0:3] = fn * f_dir
            disturbance[:, 3:6] = tn * t_dir
            result = run_episode(setup, env, commands=commands)
            success[i, j] = float(result.success.mean())
    return RobustnessGrid(force_norms=force_norms, torque_norms=torque_norms,
                          success=success, n_directions=n_directions)


def write_robustness_csv(grid: RobustnessGrid, path, plot_data: bool = False) -> None:
    """Matrix CSV (torque norms across, force norms down) or tidy long format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if plot_data:
            writer.writerow(["force_norm", "torque_norm", "success_rate"])
            for i, fn in enumerate(grid.force_norms):
                for j, tn in enumerate(grid.torque_norms):
                    writer.writerow([repr(float(fn)), repr(float(tn)),
                                     repr(float(grid.success[i, j]))])
        else:
            writer.writerow(["force_norm\\torque_norm"]
                            + [repr(float(t)) for t in grid.torque_norms])
            for i, fn in enumerate(grid.force_norms):
                writer.writerow([repr(float(fn))]
                                + [repr(float(s)) for s in grid.success[i]])


def read_robustness_csv(path) -> RobustnessGrid:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    torque = np.array([float(x) for x in rows[0][1:]])
    force = np.array([float(r[0]) for r in rows[1:]])
    success = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return RobustnessGrid(force_norms=force, torque_norms=torque, success=success,
                          n_directions=0)


# ---------------------------------------------------------------------------
# Trajectory export
# ---------------------------------------------------------------------------


class TrajectoryRecorder:
    """Accumulates one env's full state/action/reward log at the control rate."""

    def __init__(self, term_names, env_index: int = 0):
        self.term_names = list(term_names)
        self.e = env_index
        self.rows: list = []
        self._pending = None

    def header(self):
        cols = (["t"] + _vec_cols("p", 3) + _vec_cols("v", 3) + _vec_cols("R", 9)
                + _vec_cols("w", 3) + _vec_cols("foot", 12) + _vec_cols("contact", 4)
                + _vec_cols("swing", 4) + _vec_cols("action", 24)
                + _vec_cols("grf", 12) + _vec_cols("residual", 12)
                + _vec_cols("cmd", 3) + [f"r/{n}" for n in self.term_names] + ["reward"])
        return cols

    def before_step(self, env, actions) -> None:
        from .tasks import plan_query

        e = self.e
        query = plan_query(env.task.plan, env.t)
        grf, residual, _targets = env.prepare_action(
            np.asarray(actions, dtype=np.float64), query)
        self._pending = {
            "swing": query.swing[e].astype(float).tolist(),
            "action": np.asarray(actions[e], dtype=float).tolist(),
            "grf": grf[e].reshape(-1).tolist(),
            "residual": residual[e].reshape(-1).tolist(),
        }

    def after_step(self, env, reward, breakdown) -> None:
        e = self.e
        p, R, v, feet = env._srb_view()
        w = env._angular_velocity()
        contacts = env._contacts()
        row = ([float(env.t[e])] + p[e].tolist() + v[e].tolist()
               + R[e].reshape(-1).tolist() + w[e].tolist()
               + feet[e].reshape(-1).tolist()
               + contacts[e].astype(float).tolist()
               + self._pending["swing"] + self._pending["action"]
               + self._pending["grf"] + self._pending["residual"]
               + env.commands[e].tolist()
               + [float(breakdown[n][e]) for n in self.term_names]
               + [float(reward[e])])
        self.rows.append(row)


def _vec_cols(name: str, n: int):
    return [f"{name}{i}" for i in range(n)]


def export_trajectory(setup: EvalSetup, path, seed: int = 0,
                      commands: np.ndarray | None = None) -> EpisodeResult:
    """Run one deterministic episode and write the full log as CSV."""
    env = setup.make_env(1, seed)
    recorder = TrajectoryRecorder([t.name for t in setup.task.rewards.terms])
    result = run_episode(setup, env, commands=commands, recorder=recorder)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(recorder.header())
        for row in recorder.rows:
            writer.writerow([repr(float(x)) for x in row])
    return result


def read_trajectory(path):
    """Parse a trajectory log back into a dict of named float columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(x) for x in r] for r in rows[1:]])
    return {name: data[:, i] for i, name in enumerate(header)}
