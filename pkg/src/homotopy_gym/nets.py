"""Dense networks with hand-written forward/backward passes.

Policy (Gaussian head with a state-independent learned log-std), value
function, and the concurrent estimator that recovers linear velocity and
contact states from proprioceptive history. Everything is plain numpy;
gradients are exact and verified against finite differences in the tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

OBS_DIM = 27              # gravity 3, linvel 3, angvel 3, feet 12, contacts 4, phase 2
COMMAND_DIM = 3           # vx, vy, yaw-rate command appended to the policy input
ACTION_DIM = 24           # 4 x 3 GRF + 4 x 3 residual
HISTORY_LEN = 5           # proprioceptive frames (50 ms at 100 Hz)
FRAME_DIM = 36            # joint pos 12, joint vel 12, previous torque command 12

POLICY_HIDDEN = (64, 64)
VALUE_HIDDEN = (64, 64)
ESTIMATOR_HIDDEN = (64, 64)

INIT_LOG_STD = float(np.log(0.8))

# Training networks run in single precision; tests instantiate float64 copies
# for finite-difference gradient checks.
NET_DTYPE = np.float32


# ---------------------------------------------------------------------------
# MLP core
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    weights: list                 # W_l of shape (d_in, d_out)
    biases: list                  # b_l of shape (d_out,)
    activations: list             # per layer: "elu" | "linear"

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def flat_arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


def orthogonal(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal(shape if shape[0] >= shape[1] else shape[::-1])
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return np.ascontiguousarray(gain * q[: shape[0], : shape[1]])


def mlp_init(rng: np.random.Generator, sizes, final_gain: float = 1.0,
             dtype=np.float64) -> MlpParams:
    """Orthogonally initialized MLP with ELU hidden layers and a linear head."""
    weights, biases, acts = [], [], []
    for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        weights.append(orthogonal(rng, (d_in, d_out), final_gain if last else 1.0).astype(dtype))
        biases.append(np.zeros(d_out, dtype=dtype))
        acts.append("linear" if last else "elu")
    return MlpParams(weights=weights, biases=biases, activations=acts)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "elu":
        # Branch-free: max(z, 0) + expm1(min(z, 0)).
        out = np.expm1(np.minimum(z, 0.0))
        out += np.maximum(z, 0.0)
        return out
    return z


def _act_grad(z: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    # ELU derivative from the cached output: 1 + min(post, 0) equals
    # 1 for z > 0 and elu(z) + 1 otherwise.
    if kind == "elu":
        out = np.minimum(post, 0.0)
        out += 1.0
        return out
    return None


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass; returns (output, cache-of-activations for backward)."""
    x = np.atleast_2d(np.asarray(x)).astype(params.weights[0].dtype, copy=False)
    if x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input dimension {x.shape[1]} does not match network input "
            f"{params.weights[0].shape[0]}")
    pre = []
    post = [x]
    for w, b, kind in zip(params.weights, params.biases, params.activations):
        z = post[-1] @ w + b
        pre.append(z)
        post.append(_act(z, kind))
    return post[-1], (pre, post)


def mlp_backward(params: MlpParams, cache, d_out: np.ndarray):
    """Gradients of a scalar loss given d(loss)/d(output).

    Returns (d_input, grads) with grads ordered like flat_arrays().
    """
    pre, post = cache
    grads = []
    delta = np.atleast_2d(d_out)
    for layer in range(len(params.weights) - 1, -1, -1):
        g = _act_grad(pre[layer], post[layer + 1], params.activations[layer])
        if g is not None:
            delta = delta * g
        grads.append(post[layer].T @ delta)          # dW
        grads.append(delta.sum(axis=0))              # db
        if layer > 0:
            delta = delta @ params.weights[layer].T
    d_input = delta @ params.weights[0].T
    # grads were appended last-layer-first; reorder to match flat_arrays().
    ordered = []
    for layer in range(len(params.weights)):
        k = len(params.weights) - 1 - layer
        ordered.append(grads[2 * k])
        ordered.append(grads[2 * k + 1])
    return d_input, ordered


# ---------------------------------------------------------------------------
# Policy and value heads
# ---------------------------------------------------------------------------


@dataclass
class GaussianPolicy:
    net: MlpParams
    log_std: np.ndarray           # (action_dim,), state independent

    @property
    def action_dim(self) -> int:
        return len(self.log_std)


def policy_init(rng: np.random.Generator, obs_dim: int = OBS_DIM + COMMAND_DIM,
                action_dim: int = ACTION_DIM, hidden=POLICY_HIDDEN,
                dtype=NET_DTYPE, log_std0: float = INIT_LOG_STD) -> GaussianPolicy:
    net = mlp_init(rng, [obs_dim, *hidden, action_dim], final_gain=0.01, dtype=dtype)
    return GaussianPolicy(net=net, log_std=np.full(action_dim, log_std0, dtype=dtype))


def value_init(rng: np.random.Generator, obs_dim: int = OBS_DIM + COMMAND_DIM,
               hidden=VALUE_HIDDEN, dtype=NET_DTYPE) -> MlpParams:
    return mlp_init(rng, [obs_dim, *hidden, 1], final_gain=1.0, dtype=dtype)


def policy_mean(policy: GaussianPolicy, obs: np.ndarray) -> np.ndarray:
    mean, _ = mlp_forward(policy.net, obs)
    return mean


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    std = np.exp(log_std)
    z = (actions - mean) / std
    return -0.5 * (z * z).sum(axis=1) - log_std.sum() - 0.5 * len(log_std) * np.log(2.0 * np.pi)


def policy_sample(policy: GaussianPolicy, obs: np.ndarray, rng: np.random.Generator):
    """Sample actions and their log-probabilities from the diagonal Gaussian."""
    mean = policy_mean(policy, obs)
    std = np.exp(policy.log_std)
    noise = rng.standard_normal(mean.shape).astype(mean.dtype, copy=False)
    actions = mean + std * noise
    return actions, gaussian_log_prob(mean, policy.log_std, actions)


def policy_entropy(policy: GaussianPolicy) -> float:
    return float(policy.log_std.sum() + 0.5 * policy.action_dim * (1.0 + np.log(2.0 * np.pi)))


# ---------------------------------------------------------------------------
# Observations and history
# ---------------------------------------------------------------------------


def build_observation(gravity_b, v_b, w_b, feet_b, contacts, phase) -> np.ndarray:
    """Assemble the 27-dimensional policy observation (batched).

    v_b and contacts carry simulation ground truth while pretraining and the
    estimator's predictions in the full-body stage; callers choose exactly one
    source per episode.
    """
    n = len(phase)
    ang = 2.0 * np.pi * np.asarray(phase)
    obs = np.concatenate([
        np.asarray(gravity_b).reshape(n, 3),
        np.asarray(v_b).reshape(n, 3),
        np.asarray(w_b).reshape(n, 3),
        np.asarray(feet_b).reshape(n, 12),
        np.asarray(contacts, dtype=float).reshape(n, 4),
        np.sin(ang)[:, None], np.cos(ang)[:, None],
    ], axis=1)
    return obs


class HistoryBuffer:
    """Ring buffer of the last HISTORY_LEN proprioceptive frames per env.

    Frames hold joint positions, joint velocities, and the previous step's
    torque command; reads are oldest-first and zero-padded during warm-up.
    """

    def __init__(self, n_envs: int, length: int = HISTORY_LEN, frame_dim: int = FRAME_DIM):
        self.length = length
        self.frame_dim = frame_dim
        self.buf = np.zeros((n_envs, length, frame_dim))

    def push(self, frame: np.ndarray) -> None:
        self.buf[:, :-1] = self.buf[:, 1:]
        self.buf[:, -1] = frame

    def reset(self, mask: np.ndarray) -> None:
        self.buf[mask] = 0.0

    def flat(self) -> np.ndarray:
        return self.buf.reshape(len(self.buf), self.length * self.frame_dim)


# ---------------------------------------------------------------------------
# Concurrent estimator
# ---------------------------------------------------------------------------

ESTIMATOR_EXTRA = OBS_DIM - 7 + COMMAND_DIM   # non-privileged obs fields + command
ESTIMATOR_IN = HISTORY_LEN * FRAME_DIM + ESTIMATOR_EXTRA
CONTACT_THRESHOLD = 0.5


def estimator_init(rng: np.random.Generator, in_dim: int = ESTIMATOR_IN,
                   hidden=ESTIMATOR_HIDDEN, dtype=NET_DTYPE) -> MlpParams:
    return mlp_init(rng, [in_dim, *hidden, 7], final_gain=0.01, dtype=dtype)


def strip_privileged(obs: np.ndarray) -> np.ndarray:
    """Observation without linear velocity (cols 3:6) and contacts (cols 21:25)."""
    return np.concatenate([obs[:, 0:3], obs[:, 6:21], obs[:, 25:27]], axis=1)


def estimator_forward(params: MlpParams, history_flat: np.ndarray,
                      extra: np.ndarray):
    """Estimated linear velocity and contact probabilities.

    Returns (v_hat (N,3), c_prob (N,4), cache) where cache feeds the
    backward pass during concurrent training.
    """
    x = np.concatenate([history_flat, extra], axis=1)
    out, cache = mlp_forward(params, x)
    v_hat = out[:, :3]
    c_prob = 1.0 / (1.0 + np.exp(-out[:, 3:]))
    return v_hat, c_prob, cache


def contact_from_probability(c_prob: np.ndarray) -> np.ndarray:
    return c_prob > CONTACT_THRESHOLD


def estimator_loss(v_hat, v, c_prob, c) -> float:
    """Squared estimation error, averaged over the batch:
    ||v_hat - v||^2 + ||c_prob - c||^2 per sample."""
    v_hat = np.atleast_2d(v_hat)
    v = np.atleast_2d(v)
    c_prob = np.atleast_2d(c_prob)
    c = np.atleast_2d(np.asarray(c, dtype=float))
    per_sample = ((v_hat - v) ** 2).sum(axis=1) + ((c_prob - c) ** 2).sum(axis=1)
    return float(per_sample.mean())


def estimator_loss_grad(params: MlpParams, cache, v_hat, v, c_prob, c):
    """Gradients of estimator_loss wrt the network parameters."""
    n = len(v_hat)
    d_out = np.empty((n, 7))
    d_out[:, :3] = 2.0 * (v_hat - v) / n
    d_out[:, 3:] = 2.0 * (c_prob - np.asarray(c, dtype=float)) * c_prob * (1.0 - c_prob) / n
    _, grads = mlp_backward(params, cache, d_out)
    return grads


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary blob with bit-exact array round-trips
# ---------------------------------------------------------------------------

_MAGIC = b"HGCK"
_VERSION = 1


def _collect_arrays(obj, prefix, arrays, meta):
    if isinstance(obj, np.ndarray):
        key = f"@array{len(arrays)}"
        arrays.append(obj)
        return key
    if isinstance(obj, dict):
        return {k: _collect_arrays(v, f"{prefix}.{k}", arrays, meta) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_collect_arrays(v, f"{prefix}[{i}]", arrays, meta) for i, v in enumerate(obj)]
    if isinstance(obj, (str, bool)) or obj is None:
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    raise TypeError(f"cannot checkpoint value of type {type(obj)!r} at {prefix}")


def _restore_arrays(obj, arrays):
    if isinstance(obj, str) and obj.startswith("@array"):
        return arrays[int(obj[6:])]
    if isinstance(obj, dict):
        return {k: _restore_arrays(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore_arrays(v, arrays) for v in obj]
    return obj


def save_checkpoint(path, payload: dict) -> None:
    """Write a nested dict of arrays/scalars as a versioned binary blob."""
    arrays: list = []
    tree = _collect_arrays(payload, "", arrays, None)
    specs = [{"dtype": a.dtype.str, "shape": list(a.shape)} for a in arrays]
    header = json.dumps({"tree": tree, "arrays": specs}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        arrays = []
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            data = fh.read(count * dtype.itemsize)
            arrays.append(np.frombuffer(data, dtype=dtype).reshape(spec["shape"]).copy())
    return _restore_arrays(header["tree"], arrays)


def mlp_to_payload(params: MlpParams) -> dict:
    return {
        "weights": list(params.weights),
        "biases": list(params.biases),
        "activations": list(params.activations),
    }


def mlp_from_payload(data: dict) -> MlpParams:
    return MlpParams(weights=list(data["weights"]), biases=list(data["biases"]),
                     activations=list(data["activations"]))
