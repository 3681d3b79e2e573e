"""PPO trainer with GAE, concurrent estimator training, and the staged
curriculum: SRB pretraining, homotopy transfer, full-body fine-tuning, plus
the direct-transfer and vanilla baselines.

All gradients are computed against the hand-written network backward passes;
the only sources of randomness are named sub-streams derived from the run
seed, so results are reproducible bitwise for a given config and seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .envs import FullBodyTaskEnv, SRBTaskEnv, make_env
from .homotopy import lambda_schedule, timestep_schedule
from .rigid_body.model import ArticulatedModel
from .tasks import MotionTask

BASELINES = ("ours", "direct_transfer", "vanilla", "imitation_transfer")
STAGES = ("srb", "homotopy", "fullbody")


@dataclass
class TrainConfig:
    n_envs: int = 100
    rollout_seconds: float = 4.0
    epochs: int = 8
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    learning_rate: float = 3e-4
    minibatches: int = 4
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    stage: str = "srb"
    baseline: str = "ours"
    seed: int = 0
    iterations: int = 500               # budget for srb / fullbody stages
    homotopy_iterations: int = 900
    fullbody_iterations: int = 300
    control_rate: float = 100.0
    checkpoint_every: int = 50
    dt_min_fraction: float = 0.25
    policy_hidden: tuple = nets.POLICY_HIDDEN
    value_hidden: tuple = nets.VALUE_HIDDEN
    init_log_std: float = nets.INIT_LOG_STD
    grf_action_scale: float = 0.25      # GRF units per raw action, x body weight
    kl_target: float = 0.01             # adaptive-lr setpoint; 0 disables adaptation
    lr_min: float = 1e-5
    lr_max: float = 1e-2

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.baseline == "imitation_transfer":
            raise NotImplementedError(
                "the imitation-transfer baseline is reserved but not implemented")
        for name in ("n_envs", "epochs", "minibatches", "iterations"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def steps_per_rollout(self) -> int:
        return int(round(self.rollout_seconds * self.control_rate))

    @property
    def total_transfer_iterations(self) -> int:
        return self.homotopy_iterations + self.fullbody_iterations


@dataclass
class RolloutBuffer:
    """Time-major rollout storage: (steps, n_envs, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    label_v: np.ndarray                 # privileged base-frame linear velocity
    label_c: np.ndarray                 # privileged contact states
    est_inputs: np.ndarray | None       # estimator inputs (full-body stages)
    last_values: np.ndarray | None = None

    @classmethod
    def allocate(cls, steps: int, n_envs: int, obs_dim: int, act_dim: int,
                 with_estimator: bool) -> "RolloutBuffer":
        f32 = nets.NET_DTYPE
        return cls(
            obs=np.zeros((steps, n_envs, obs_dim), dtype=f32),
            actions=np.zeros((steps, n_envs, act_dim), dtype=f32),
            log_probs=np.zeros((steps, n_envs), dtype=f32),
            rewards=np.zeros((steps, n_envs)),
            values=np.zeros((steps, n_envs)),
            dones=np.zeros((steps, n_envs), dtype=bool),
            label_v=np.zeros((steps, n_envs, 3), dtype=f32),
            label_c=np.zeros((steps, n_envs, 4), dtype=f32),
            est_inputs=(np.zeros((steps, n_envs, nets.ESTIMATOR_IN), dtype=f32)
                        if with_estimator else None),
        )

    @property
    def steps(self) -> int:
        return len(self.obs)

    @property
    def n_envs(self) -> int:
        return self.obs.shape[1]


def compute_gae(rewards, values, dones, gamma: float, lam: float,
                last_values=None):
    """Generalized advantage estimation over time-major arrays.

    A_t = sum_k (gamma lam)^k delta_{t+k}, delta_t = r_t + gamma V_{t+1}
    (1 - done_t) - V_t; returns (advantages, returns = A + V).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    not_done = 1.0 - np.asarray(dones, dtype=float)
    T = len(rewards)
    adv = np.zeros_like(rewards)
    if last_values is None:
        last_values = np.zeros(rewards.shape[1:])
    gae = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < T else last_values
        delta = rewards[t] + gamma * next_value * not_done[t] - values[t]
        gae = delta + gamma * lam * not_done[t] * gae
        adv[t] = gae
    return adv, adv + values


class Adam:
    """Adaptive-moment optimizer updating parameter arrays in place."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "lr": self.lr, "m": list(self.m), "v": list(self.v)}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.lr = float(state.get("lr", self.lr))
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    if std < 1e-12:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


class Trainer:
    """Owns the environments, networks, optimizers, and RNG streams."""

    def __init__(self, config: TrainConfig, task: MotionTask, model: ArticulatedModel,
                 init_payload: dict | None = None):
        self.config = config
        self.task = task
        self.model = model
        if config.rollout_seconds < task.duration - 1e-9:
            raise ValueError("rollout must be at least one episode long")

        root = np.random.SeedSequence(config.seed)
        seeds = root.spawn(5 + config.n_envs)
        self.rng_policy_init = np.random.default_rng(seeds[0])
        self.rng_value_init = np.random.default_rng(seeds[1])
        self.rng_est_init = np.random.default_rng(seeds[2])
        self.rng_action = np.random.default_rng(seeds[3])
        self.rng_shuffle = np.random.default_rng(seeds[4])
        env_rngs = [np.random.default_rng(s) for s in seeds[5:]]

        lam0 = self._lambda_for(0)
        self.env = make_env(config.stage, task, model, config.n_envs, env_rngs,
                            lam=lam0, control_rate=config.control_rate,
                            **({"dt_min_fraction": config.dt_min_fraction}
                               if config.stage != "srb" else {}))
        self.env.grf_scale_factor = config.grf_action_scale
        self.obs_dim = nets.OBS_DIM + nets.COMMAND_DIM
        self.act_dim = nets.ACTION_DIM
        self.history = nets.HistoryBuffer(config.n_envs)

        if init_payload is None:
            self.policy = nets.policy_init(self.rng_policy_init, self.obs_dim,
                                           self.act_dim, config.policy_hidden,
                                           log_std0=config.init_log_std)
            self.value = nets.value_init(self.rng_value_init, self.obs_dim,
                                         config.value_hidden)
            self.estimator = nets.estimator_init(self.rng_est_init)
            self.iteration = 0
        else:
            self._restore(init_payload)

        ac_params = (list(self.policy.net.flat_arrays()) + [self.policy.log_std]
                     + list(self.value.flat_arrays()))
        # With KL-adaptive stepping the rate warms up from the floor; starting
        # at the configured rate lets the very first minibatches overshoot the
        # trust region before the controller can react.
        lr0 = config.lr_min if config.kl_target > 0.0 else config.learning_rate
        self.optimizer = Adam(ac_params, lr0)
        self.est_optimizer = Adam(list(self.estimator.flat_arrays()), config.learning_rate)
        if init_payload is not None and "optimizer" in init_payload:
            self.optimizer.load_state(init_payload["optimizer"])
            self.est_optimizer.load_state(init_payload["est_optimizer"])

    # -- staged curriculum ----------------------------------------------------

    def _lambda_for(self, iteration: int) -> float:
        cfg = self.config
        if cfg.stage == "srb":
            return 1.0
        if cfg.stage == "homotopy" and cfg.baseline == "ours":
            if iteration < cfg.homotopy_iterations:
                return lambda_schedule(iteration, cfg.homotopy_iterations)
            return 1.0
        return 1.0      # direct transfer, vanilla, and plain full-body run the full model

    def total_iterations(self) -> int:
        if self.config.stage == "homotopy":
            return self.config.total_transfer_iterations
        return self.config.iterations

    # -- observation assembly ---------------------------------------------------

    def _estimator_extra(self, parts) -> np.ndarray:
        ang = 2.0 * np.pi * parts["phase"]
        return np.concatenate([
            parts["gravity_b"], parts["w_b"],
            parts["feet_b"].reshape(self.config.n_envs, 12),
            np.sin(ang)[:, None], np.cos(ang)[:, None],
            self.env.commands,
        ], axis=1)

    def _observe(self):
        """Policy input plus the estimator input/labels for this step.

        The SRB stage reads privileged simulation values; full-body stages use
        the estimator's predictions (never mixed within a stage).
        """
        parts = self.env.observation_parts()
        est_in = None
        if isinstance(self.env, SRBTaskEnv):
            v_obs = parts["v_true_b"]
            c_obs = parts["contacts_true"].astype(float)
        else:
            est_in = np.concatenate([self.history.flat(), self._estimator_extra(parts)], axis=1)
            v_hat, c_prob, _ = nets.estimator_forward(self.estimator,
                                                      est_in[:, :nets.HISTORY_LEN * nets.FRAME_DIM],
                                                      est_in[:, nets.HISTORY_LEN * nets.FRAME_DIM:])
            v_obs = v_hat
            c_obs = nets.contact_from_probability(c_prob).astype(float)
        obs27 = nets.build_observation(parts["gravity_b"], v_obs, parts["w_b"],
                                       parts["feet_b"], c_obs, parts["phase"])
        policy_in = np.concatenate([obs27, self.env.commands], axis=1)
        return policy_in, est_in, parts

    # -- rollout collection ----------------------------------------------------

    def collect_rollouts(self) -> tuple:
        """One synchronized rollout from freshly reset environments.

        Returns (buffer, stats) where stats carries per-term reward means,
        per-episode returns, and fault counts.
        """
        cfg = self.config
        steps = cfg.steps_per_rollout
        with_est = not isinstance(self.env, SRBTaskEnv)
        buf = RolloutBuffer.allocate(steps, cfg.n_envs, self.obs_dim, self.act_dim, with_est)

        self.env.reset_all()
        self.history.buf[:] = 0.0
        term_sums: dict = {}
        ep_return = np.zeros(cfg.n_envs)
        episode_returns: list = []
        n_faults = 0

        for t in range(steps):
            policy_in, est_in, parts = self._observe()
            actions, log_probs = nets.policy_sample(self.policy, policy_in, self.rng_action)
            values, _ = nets.mlp_forward(self.value, policy_in)
            reward, done, breakdown = self.env.step(actions)

            buf.obs[t] = policy_in
            buf.actions[t] = actions
            buf.log_probs[t] = log_probs
            buf.rewards[t] = reward
            buf.values[t] = values[:, 0]
            buf.dones[t] = done
            buf.label_v[t] = parts["v_true_b"]
            buf.label_c[t] = parts["contacts_true"]
            if with_est:
                buf.est_inputs[t] = est_in
                frame = self.env.proprioceptive_frame()
                self.history.push(frame)
                self.history.reset(done)

            for name, vals in breakdown.items():
                term_sums[name] = term_sums.get(name, 0.0) + float(vals.sum())
            ep_return += reward
            if done.any():
                episode_returns.extend(ep_return[done].tolist())
                ep_return[done] = 0.0
                n_faults += int((self.env.fault != 0).sum())

        policy_in, _, _ = self._observe()
        last_values, _ = nets.mlp_forward(self.value, policy_in)
        buf.last_values = last_values[:, 0]

        denom = steps * cfg.n_envs
        stats = {
            "terms": {k: v / denom for k, v in term_sums.items()},
            "episode_returns": np.asarray(episode_returns),
            "n_faults": n_faults,
        }
        return buf, stats

    # -- updates ---------------------------------------------------------------

    def ppo_update(self, buf: RolloutBuffer) -> dict:
        """Clipped-surrogate update: epochs x shuffled minibatches over the buffer."""
        cfg = self.config
        adv, rets = compute_gae(buf.rewards, buf.values, buf.dones,
                                cfg.gamma, cfg.gae_lambda, buf.last_values)
        adv = normalize_advantages(adv)

        n = buf.steps * buf.n_envs
        obs = buf.obs.reshape(n, -1)
        actions = buf.actions.reshape(n, -1)
        logp_old = buf.log_probs.reshape(n)
        adv = adv.reshape(n)
        rets = rets.reshape(n)

        mb_size = n // cfg.minibatches
        kl_sum = clip_sum = pi_sum = v_sum = 0.0
        n_batches = 0
        for _epoch in range(cfg.epochs):
            order = self.rng_shuffle.permutation(n)
            for k in range(cfg.minibatches):
                sel = order[k * mb_size:(k + 1) * mb_size]
                stats = self._minibatch_step(obs[sel], actions[sel], logp_old[sel],
                                             adv[sel], rets[sel])
                # KL-adaptive learning rate keeps the eight fixed epochs inside
                # a trust region; without it the 32 Adam steps per iteration
                # move the 24-dimensional action distribution arbitrarily far.
                if cfg.kl_target > 0.0:
                    if stats["kl"] > 2.0 * cfg.kl_target:
                        self.optimizer.lr = max(cfg.lr_min, self.optimizer.lr / 1.5)
                    elif 0.0 <= stats["kl"] < 0.5 * cfg.kl_target:
                        self.optimizer.lr = min(cfg.lr_max, self.optimizer.lr * 1.5)
                kl_sum += stats["kl"]
                clip_sum += stats["clip_fraction"]
                pi_sum += stats["policy_loss"]
                v_sum += stats["value_loss"]
                n_batches += 1
        return {
            "kl": kl_sum / n_batches,
            "lr": self.optimizer.lr,
            "clip_fraction": clip_sum / n_batches,
            "policy_loss": pi_sum / n_batches,
            "value_loss": v_sum / n_batches,
            "entropy": nets.policy_entropy(self.policy),
        }

    def _minibatch_step(self, obs, actions, logp_old, adv, rets) -> dict:
        cfg = self.config
        b = len(obs)
        dtype = self.policy.log_std.dtype
        logp_old = logp_old.astype(dtype, copy=False)
        adv = adv.astype(dtype, copy=False)
        rets = rets.astype(dtype, copy=False)
        mean, cache_pi = nets.mlp_forward(self.policy.net, obs)
        std = np.exp(self.policy.log_std)
        z = (actions.astype(dtype, copy=False) - mean) / std
        logp = -0.5 * (z * z).sum(axis=1) - self.policy.log_std.sum() \
            - 0.5 * self.act_dim * np.log(2.0 * np.pi)
        ratio = np.exp(logp - logp_old)
        clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
        surr1 = ratio * adv
        surr2 = clipped * adv
        policy_loss = -np.minimum(surr1, surr2).mean()

        # d(loss)/d(logp): gradient flows only where the unclipped branch is taken.
        use_unclipped = surr1 <= surr2
        d_logp = np.where(use_unclipped, -adv * ratio, 0.0) / b
        d_mean = d_logp[:, None] * (z / std)
        d_log_std = (d_logp[:, None] * (z * z - 1.0)).sum(axis=0)
        d_log_std -= cfg.entropy_coef        # entropy bonus: dH/dlog_std = 1
        _, pi_grads = nets.mlp_backward(self.policy.net, cache_pi, d_mean)

        v_pred, cache_v = nets.mlp_forward(self.value, obs)
        v_err = v_pred[:, 0] - rets
        value_loss = float((v_err ** 2).mean())
        d_v = (2.0 * cfg.value_coef / b) * v_err[:, None]
        _, v_grads = nets.mlp_backward(self.value, cache_v, d_v)

        self.optimizer.step(pi_grads + [d_log_std] + v_grads)
        return {
            "kl": float((logp_old - logp).mean()),
            "clip_fraction": float((np.abs(ratio - 1.0) > cfg.clip_ratio).mean()),
            "policy_loss": float(policy_loss),
            "value_loss": value_loss,
        }

    def estimator_update(self, buf: RolloutBuffer) -> float:
        """One epoch of squared-error regression on the recorded labels."""
        cfg = self.config
        n = buf.steps * buf.n_envs
        x = buf.est_inputs.reshape(n, -1)
        v_lab = buf.label_v.reshape(n, 3)
        c_lab = buf.label_c.reshape(n, 4)
        order = self.rng_shuffle.permutation(n)
        mb = n // cfg.minibatches
        hist_dim = nets.HISTORY_LEN * nets.FRAME_DIM
        total = 0.0
        for k in range(cfg.minibatches):
            sel = order[k * mb:(k + 1) * mb]
            v_hat, c_prob, cache = nets.estimator_forward(
                self.estimator, x[sel, :hist_dim], x[sel, hist_dim:])
            total += nets.estimator_loss(v_hat, v_lab[sel], c_prob, c_lab[sel])
            grads = nets.estimator_loss_grad(self.estimator, cache, v_hat, v_lab[sel],
                                             c_prob, c_lab[sel])
            self.est_optimizer.step(grads)
        return total / cfg.minibatches

    # -- evaluation --------------------------------------------------------------

    def evaluate(self, commands: np.ndarray) -> dict:
        """Deterministic-policy episode on fixed held-out commands."""
        self.env.reset_all()
        if self.task.has_commands:
            self.env.commands[:] = commands[: self.config.n_envs]
        eval_history = nets.HistoryBuffer(self.config.n_envs)
        saved = self.history
        self.history = eval_history
        term_sums: dict = {}
        total = np.zeros(self.config.n_envs)
        alive = np.ones(self.config.n_envs, dtype=bool)
        for _t in range(self.env.episode_steps):
            policy_in, _, _ = self._observe()
            actions = nets.policy_mean(self.policy, policy_in)
            reward, done, breakdown = self.env.step(actions)
            total += np.where(alive, reward, 0.0)
            for name, vals in breakdown.items():
                term_sums[name] = term_sums.get(name, 0.0) + float(vals[alive].sum())
            if not isinstance(self.env, SRBTaskEnv):
                self.history.push(self.env.proprioceptive_frame())
                self.history.reset(done)
            alive &= ~(self.env.fault != 0)
            if self.task.has_commands:
                self.env.commands[:] = commands[: self.config.n_envs]
        self.history = saved
        denom = self.env.episode_steps * self.config.n_envs
        out = {f"eval_{k}": v / denom for k, v in term_sums.items()}
        out["eval_return"] = float(total.mean())
        out["eval_alive_fraction"] = float(alive.mean())
        return out

    # -- checkpointing -------------------------------------------------------------

    def checkpoint_payload(self) -> dict:
        return {
            "format": "homotopy-gym-trainer",
            "config": asdict(self.config),
            "iteration": self.iteration,
            "lam": self._lambda_for(self.iteration),
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "policy": nets.mlp_to_payload(self.policy.net),
            "log_std": self.policy.log_std,
            "value": nets.mlp_to_payload(self.value),
            "estimator": nets.mlp_to_payload(self.estimator),
            "optimizer": self.optimizer.state(),
            "est_optimizer": self.est_optimizer.state(),
            "rng": {
                "action": self.rng_action.bit_generator.state,
                "shuffle": self.rng_shuffle.bit_generator.state,
                "envs": [g.bit_generator.state for g in self.env.rngs],
            },
        }

    def save(self, path) -> None:
        nets.save_checkpoint(path, self.checkpoint_payload())

    def _restore(self, payload: dict) -> None:
        self.policy = nets.GaussianPolicy(net=nets.mlp_from_payload(payload["policy"]),
                                          log_std=payload["log_std"].copy())
        self.value = nets.mlp_from_payload(payload["value"])
        self.estimator = nets.mlp_from_payload(payload["estimator"])
        self.iteration = 0 if payload.get("config", {}).get("stage") != self.config.stage \
            else int(payload["iteration"])
        if payload["obs_dim"] != nets.OBS_DIM + nets.COMMAND_DIM:
            raise ValueError(
                f"checkpoint observation dimension {payload['obs_dim']} does not match "
                f"this build ({nets.OBS_DIM + nets.COMMAND_DIM})")
        rng = payload.get("rng")
        if rng is not None and payload.get("config", {}).get("stage") == self.config.stage:
            self.rng_action.bit_generator.state = rng["action"]
            self.rng_shuffle.bit_generator.state = rng["shuffle"]
            for g, s in zip(self.env.rngs, rng["envs"]):
                g.bit_generator.state = s

    # -- main loop ----------------------------------------------------------------

    def train(self, out_dir, iterations: int | None = None, eval_every: int = 0,
              eval_commands: np.ndarray | None = None, stop_fn=None,
              log_fn=None) -> Path:
        """Run the stage; writes metrics.csv, eval.csv and periodic checkpoints.

        stop_fn(iteration, row) may end training early (e.g. once an
        acceptance threshold is reached). Returns the final checkpoint path.
        """
        cfg = self.config
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        eval_path = out_dir / "eval.csv"
        total = iterations if iterations is not None else self.total_iterations()
        term_names = sorted(t.name for t in self.task.rewards.terms)
        header = (["iteration", "lambda", "dt", "return_mean", "return_min",
                   "return_max", "n_faults"] + [f"r_mean/{n}" for n in term_names]
                  + ["est_loss", "kl", "clip_fraction", "policy_loss", "value_loss",
                     "entropy", "lr"])
        mode = "a" if self.iteration > 0 and metrics_path.exists() else "w"
        t_start = time.monotonic()
        with open(metrics_path, mode) as mfh, open(eval_path, mode) as efh:
            if mode == "w":
                mfh.write(",".join(header) + "\n")
            eval_header_written = mode == "a"
            while self.iteration < total:
                it = self.iteration
                lam = self._lambda_for(it)
                if isinstance(self.env, FullBodyTaskEnv) and lam != self.env.lam:
                    self.env.set_lambda(lam)
                dt = (self.env.dt if isinstance(self.env, FullBodyTaskEnv)
                      else self.env.sim.dt)

                buf, roll_stats = self.collect_rollouts()
                up_stats = self.ppo_update(buf)
                est_loss = ""
                if buf.est_inputs is not None:
                    est_loss = repr(self.estimator_update(buf))

                rets = roll_stats["episode_returns"]
                row = {
                    "iteration": it,
                    "lambda": lam,
                    "dt": dt,
                    "return_mean": float(rets.mean()) if len(rets) else 0.0,
                    "return_min": float(rets.min()) if len(rets) else 0.0,
                    "return_max": float(rets.max()) if len(rets) else 0.0,
                    "n_faults": roll_stats["n_faults"],
                    **{f"r_mean/{k}": v for k, v in roll_stats["terms"].items()},
                    "est_loss": est_loss,
                    **up_stats,
                }
                mfh.write(",".join(_fmt(row.get(h, "")) for h in header) + "\n")
                mfh.flush()

                if eval_every and (it + 1) % eval_every == 0:
                    ev = self.evaluate(eval_commands) if eval_commands is not None \
                        else self.evaluate(self.env.commands.copy())
                    ev["iteration"] = it
                    if not eval_header_written:
                        efh.write(",".join(["iteration"] + sorted(k for k in ev if k != "iteration")) + "\n")
                        eval_header_written = True
                    efh.write(",".join([_fmt(ev["iteration"])] +
                                       [_fmt(ev[k]) for k in sorted(ev) if k != "iteration"]) + "\n")
                    efh.flush()
                    row.update(ev)

                self.iteration = it + 1
                if log_fn is not None:
                    log_fn(it, row)
                if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                    self.save(out_dir / f"checkpoint_{self.iteration:06d}.bin")
                if (self.config.stage == "homotopy" and self.config.baseline == "ours"
                        and self.iteration == cfg.homotopy_iterations):
                    self.save(out_dir / "checkpoint_homotopy_end.bin")
                if stop_fn is not None and stop_fn(it, row):
                    break
        final = out_dir / "checkpoint_final.bin"
        self.save(final)
        with open(out_dir / "run_info.json", "w") as fh:
            json.dump({"wall_clock_seconds": time.monotonic() - t_start,
                       "iterations_run": self.iteration}, fh, indent=2)
        return final


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def train_stage(config: TrainConfig, task: MotionTask, model: ArticulatedModel,
                out_dir, checkpoint_path=None, **train_kwargs) -> Path:
    """Build a trainer for the configured stage/baseline and run it.

    Transfer stages (ours, direct_transfer) require a pretraining checkpoint;
    vanilla ignores it and starts from random initialization.
    """
    payload = None
    if config.stage == "homotopy" and config.baseline in ("ours", "direct_transfer"):
        if checkpoint_path is None:
            raise FileNotFoundError("transfer stages need a pretraining checkpoint")
        payload = nets.load_checkpoint(checkpoint_path)
    elif checkpoint_path is not None and config.baseline != "vanilla":
        payload = nets.load_checkpoint(checkpoint_path)
    trainer = Trainer(config, task, model, init_payload=payload)
    trainer.train(out_dir, **train_kwargs)
    return Path(out_dir) / "checkpoint_final.bin"
