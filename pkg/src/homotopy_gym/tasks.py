"""Motion task library: contact plans, swing references, keyframes, rewards.

Tasks are loaded from YAML files; the three shipped families (gaits, flips,
wall-assisted maneuvers) are pure data on top of the three swing modes
implemented here. All evaluation functions are batched over environments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geom import bezier_point, X_AXIS, Y_AXIS, Z_AXIS

FOOT_NAMES = ("FL", "FR", "RL", "RR")

_AXIS_BY_NAME = {"x": X_AXIS, "y": Y_AXIS, "z": Z_AXIS}
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


class TaskError(ValueError):
    """Configuration error in a task file, with the offending field path."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


# ---------------------------------------------------------------------------
# Contact plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanQuery:
    swing: np.ndarray        # (..., 4) bool, True while a foot is in the air
    swing_phase: np.ndarray  # (..., 4) in [0, 1], 0 outside air intervals
    phase: np.ndarray        # (...,) global motion phase in [0, 1]


@dataclass(frozen=True)
class ContactPlan:
    """Per-foot schedule of allowed air intervals over the motion duration.

    Periodic plans repeat a stance/swing cycle with per-foot phase offsets;
    interval plans list explicit air windows on a clock that may be offset
    from episode time (e.g. flips start their air-phase clock after the
    crouch).
    """

    duration: float
    periodic: bool
    stance_duration: float = 0.0
    swing_duration: float = 0.0
    phase_offsets: np.ndarray = field(default_factory=lambda: np.zeros(4))
    air_intervals: np.ndarray = field(default_factory=lambda: np.full((4, 1, 2), np.inf))
    clock_offset: float = 0.0

    @property
    def period(self) -> float:
        return self.stance_duration + self.swing_duration

    def landing_start(self) -> float:
        """Episode time after which the landing phase is active (interval plans)."""
        if self.periodic:
            return np.inf
        ends = self.air_intervals[..., 1]
        return self.clock_offset + float(np.max(ends[np.isfinite(ends)]))


def plan_query(plan: ContactPlan, t) -> PlanQuery:
    """Stance/swing flags, per-foot swing phase and global phase at time t."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, plan.duration)
    if plan.periodic:
        local = (t[..., None] - plan.phase_offsets * plan.period) % plan.period
        swing = local >= plan.stance_duration
        s = np.where(swing, (local - plan.stance_duration) / plan.swing_duration, 0.0)
        phase = (t % plan.period) / plan.period
        return PlanQuery(swing=swing, swing_phase=np.clip(s, 0.0, 1.0), phase=phase)

    ta = t[..., None, None] - plan.clock_offset           # (..., 1, 1)
    start = plan.air_intervals[..., 0]                    # (4, k)
    end = plan.air_intervals[..., 1]
    inside = (ta >= start) & (ta < end)                   # (..., 4, k)
    swing = inside.any(axis=-1)
    s_all = np.where(inside, (ta - start) / np.where(end > start, end - start, 1.0), 0.0)
    s = s_all.sum(axis=-1)                                # at most one interval active
    phase = t / plan.duration
    return PlanQuery(swing=swing, swing_phase=np.clip(s, 0.0, 1.0), phase=phase)


# ---------------------------------------------------------------------------
# Swing references
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SwingSpec:
    """Nominal swing trajectory parameters for one of the three motion modes."""

    mode: str                       # gait_raibert | flip_tuck | wall_blend
    clearance: float = 0.1
    raibert_gain: float = 0.03      # s, capture-style velocity-error gain
    tuck_points: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 0.0, -0.2], [0.0, 0.0, -0.3]])
    )
    local_points: np.ndarray = field(
        default_factory=lambda: np.array([[-0.1, 0.0, -0.2], [0.0, 0.0, -0.1], [0.1, 0.0, -0.2]])
    )
    blend_coeff: float = 16.0
    blend_power: float = 4.0


def raibert_target(hip_ground, v, v_cmd, t_stance: float, gain: float = 0.03) -> np.ndarray:
    """Foothold ahead of the hip by half a stance of travel plus a velocity-error
    correction; z pinned to the ground height carried in hip_ground."""
    hip_ground = np.asarray(hip_ground, dtype=float)
    target = hip_ground.copy()
    v = np.asarray(v, dtype=float)
    v_cmd = np.asarray(v_cmd, dtype=float)
    target[..., :2] = (
        hip_ground[..., :2]
        + 0.5 * t_stance * v[..., :2]
        + gain * (v[..., :2] - v_cmd[..., :2])
    )
    return target


def wall_blend_weight(phase, coeff: float = 16.0, power: float = 4.0):
    """Local-vs-world blending weight: 1 at the phase endpoints, 0 at mid-motion."""
    phase = np.asarray(phase, dtype=float)
    return coeff * (phase - 0.5) ** power


@dataclass
class SwingContext:
    """Batched state snapshot consumed by nominal_swing_targets.

    Positions are world-frame; hip_offsets are base-frame offsets from the COM.
    keyframe_feet is only needed by the wall_blend mode.
    """

    p: np.ndarray                 # (N, 3) COM position
    R: np.ndarray                 # (N, 3, 3)
    v: np.ndarray                 # (N, 3)
    feet: np.ndarray              # (N, 4, 3)
    hip_offsets: np.ndarray       # (4, 3)
    swing_phase: np.ndarray       # (N, 4)
    phase: np.ndarray             # (N,)
    v_cmd: np.ndarray             # (N, 3)
    stance_duration: float = 0.2
    ground_height: float = 0.0
    keyframe_feet: np.ndarray | None = None   # (N, 4, 3)


def nominal_swing_targets(spec: SwingSpec, ctx: SwingContext) -> np.ndarray:
    """World-frame nominal swing points for all four feet, batched over envs."""
    hips_world = ctx.p[:, None, :] + np.einsum("nij,fj->nfi", ctx.R, ctx.hip_offsets)

    if spec.mode == "gait_raibert":
        hip_ground = hips_world.copy()
        hip_ground[..., 2] = ctx.ground_height
        target = raibert_target(
            hip_ground, ctx.v[:, None, :], ctx.v_cmd[:, None, :],
            ctx.stance_duration, spec.raibert_gain,
        )
        mid = 0.5 * (ctx.feet + target)
        mid[..., 2] += spec.clearance
        return bezier_point(ctx.feet, mid, target, ctx.swing_phase)

    if spec.mode == "flip_tuck":
        feet_local = np.einsum("nji,nfj->nfi", ctx.R, ctx.feet - ctx.p[:, None, :])
        feet_local = feet_local - ctx.hip_offsets
        local = bezier_point(feet_local, spec.tuck_points[0], spec.tuck_points[1], ctx.swing_phase)
        return ctx.p[:, None, :] + np.einsum("nij,nfj->nfi", ctx.R, ctx.hip_offsets + local)

    if spec.mode == "wall_blend":
        if ctx.keyframe_feet is None:
            raise TaskError("swing.mode", "wall_blend requires keyframe foot targets")
        local = bezier_point(
            spec.local_points[0], spec.local_points[1], spec.local_points[2],
            ctx.phase,
        )
        r_b = ctx.p[:, None, :] + np.einsum("nij,nfj->nfi", ctx.R, ctx.hip_offsets + local[:, None, :])
        r_w = np.where((ctx.phase < 0.5)[:, None, None], ctx.feet, ctx.keyframe_feet)
        eta = wall_blend_weight(ctx.phase, spec.blend_coeff, spec.blend_power)
        return eta[:, None, None] * r_b + (1.0 - eta)[:, None, None] * r_w

    raise TaskError("swing.mode", f"unknown swing mode {spec.mode!r}")


def nominal_swing(spec: SwingSpec, foot: int, s: float, ctx: SwingContext) -> np.ndarray:
    """Single-foot convenience wrapper mirroring the batched evaluation."""
    sub = SwingContext(
        p=ctx.p, R=ctx.R, v=ctx.v, feet=ctx.feet, hip_offsets=ctx.hip_offsets,
        swing_phase=ctx.swing_phase.copy(), phase=ctx.phase, v_cmd=ctx.v_cmd,
        stance_duration=ctx.stance_duration, ground_height=ctx.ground_height,
        keyframe_feet=ctx.keyframe_feet,
    )
    sub.swing_phase[:, foot] = s
    return nominal_swing_targets(spec, sub)[:, foot]


# ---------------------------------------------------------------------------
# Keyframes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Keyframe:
    name: str
    p_target: np.ndarray                       # (3,)
    axes: dict                                 # {"x"|"y"|"z": unit 3-vector}


@dataclass(frozen=True)
class KeyframeTable:
    frames: tuple
    durations: np.ndarray                      # (n,) per-phase durations, sums to plan duration

    @property
    def boundaries(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    def phase_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.boundaries, t, side="right") - 1
        return np.clip(idx, 0, len(self.frames) - 1)

    def targets_at(self, t):
        """Per-env (p_target, R_target, column mask) arrays for times t (N,)."""
        idx = self.phase_index(t)
        p = np.stack([f.p_target for f in self.frames])[idx]
        R = np.zeros((len(self.frames), 3, 3))
        mask = np.zeros((len(self.frames), 3), dtype=bool)
        for k, f in enumerate(self.frames):
            for ax, vec in f.axes.items():
                R[k][:, _AXIS_INDEX[ax]] = vec
                mask[k][_AXIS_INDEX[ax]] = True
        return p, R[idx], mask[idx]


def keyframe_query(table: KeyframeTable, phase_index: int) -> Keyframe:
    if not 0 <= phase_index < len(table.frames):
        raise TaskError(f"keyframes[{phase_index}]", "no such keyframe phase")
    return table.frames[phase_index]


def rotation_from_axis_constraints(axes: dict) -> np.ndarray:
    """Orthonormal right-handed rotation honoring the constrained columns.

    Free columns complete the frame as close to their identity defaults as the
    constraints allow; the constrained columns are taken verbatim.
    """
    constrained = [n for n in ("x", "y", "z") if n in axes]
    free = [n for n in ("x", "y", "z") if n not in axes]

    def residual(v, basis):
        v = np.asarray(v, dtype=float)
        for u in basis:
            v = v - (v @ u) * u
        return v

    done: list = []
    resolved: dict = {}
    for name in constrained:
        v = residual(axes[name], done)
        n = np.linalg.norm(v)
        if n < 1e-9:
            raise TaskError("keyframes", f"conflicting axis constraints near {name!r}")
        done.append(v / n)
        resolved[name] = done[-1]
    # Free columns: most-orthogonal default first, cross product as fallback.
    for name in sorted(free, key=lambda n: -np.linalg.norm(residual(_AXIS_BY_NAME[n], done))):
        v = residual(_AXIS_BY_NAME[name], done)
        n = np.linalg.norm(v)
        if n < 1e-6:
            v = np.cross(done[0], done[1])
            n = np.linalg.norm(v)
        done.append(v / n)
        resolved[name] = done[-1]
    R = np.stack([resolved["x"], resolved["y"], resolved["z"]], axis=1)
    if np.linalg.det(R) < 0:
        flip = free[0] if free else "z"
        R[:, _AXIS_INDEX[flip]] *= -1.0
    return R


def keyframe_foot_targets(table: KeyframeTable, t, hip_offsets: np.ndarray,
                          terrain_ground: float, wall_x: float | None) -> np.ndarray:
    """Nominal per-foot positions for the keyframe following time t.

    The body pose of the upcoming keyframe places the hips; each foot is then
    projected onto the nearer support surface (ground or wall).
    """
    t = np.asarray(t, dtype=float)
    idx = np.minimum(table.phase_index(t) + 1, len(table.frames) - 1)
    p = np.stack([f.p_target for f in table.frames])
    rots = np.stack([rotation_from_axis_constraints(f.axes) for f in table.frames])
    feet = p[idx][:, None, :] + np.einsum("nij,fj->nfi", rots[idx], hip_offsets)
    ground_gap = feet[..., 2] - terrain_ground
    if wall_x is not None:
        wall_gap = wall_x - feet[..., 0]
        on_wall = wall_gap < ground_gap
        feet[..., 0] = np.where(on_wall, wall_x, feet[..., 0])
        feet[..., 2] = np.where(on_wall, feet[..., 2], terrain_ground)
    else:
        feet[..., 2] = terrain_ground
    return feet


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardTerm:
    name: str
    sign: str                      # pos | neg
    form: str                      # exp | linear
    a: float
    b: float = 0.0                 # exp form
    upper: float = 0.0             # linear form
    lower: float = 0.0
    quantity: str = ""
    params: dict = field(default_factory=dict)
    phase: str = "always"          # always | air | landing


@dataclass
class RewardContext:
    """Quantities the reward selectors read; built by the environments."""

    t: np.ndarray                  # (N,)
    p: np.ndarray                  # (N, 3)
    v: np.ndarray                  # (N, 3)
    R: np.ndarray                  # (N, 3, 3)
    w: np.ndarray                  # (N, 3)
    grf: np.ndarray                # (N, 4, 3) applied stance forces (zero in swing)
    residual: np.ndarray           # (N, 4, 3) applied residuals (zero in stance)
    swing: np.ndarray              # (N, 4) bool
    v_cmd: np.ndarray              # (N, 3)
    w_cmd: np.ndarray              # (N, 3)
    landing: np.ndarray            # (N,) bool
    p_target: np.ndarray | None = None   # (N, 3)
    R_target: np.ndarray | None = None   # (N, 3, 3)
    R_mask: np.ndarray | None = None     # (N, 3) constrained-column mask


def _need(value, term: RewardTerm, what: str):
    if value is None:
        raise TaskError(f"rewards.{term.name}", f"task provides no {what}")
    return value


def _quantity(term: RewardTerm, ctx: RewardContext) -> np.ndarray:
    q = term.quantity
    prm = term.params
    if q == "height_error":
        return ctx.p[:, 2:3] - float(prm.get("target", 0.0))
    if q == "com_error":
        return ctx.p - np.asarray(prm["target"], dtype=float)
    if q == "body_axis_error":
        col = _AXIS_INDEX[prm.get("axis", "z")]
        return ctx.R[:, :, col] - np.asarray(prm["target"], dtype=float)
    if q == "keyframe_pos_error":
        return ctx.p - _need(ctx.p_target, term, "keyframe position targets")
    if q == "keyframe_rot_error":
        R_t = _need(ctx.R_target, term, "keyframe rotation targets")
        mask = _need(ctx.R_mask, term, "keyframe rotation targets")
        diff = (ctx.R - R_t) * mask[:, None, :]
        return diff.reshape(len(diff), 9)
    if q == "linvel_error":
        return ctx.v - ctx.v_cmd
    if q == "angvel_error":
        return ctx.w - ctx.w_cmd
    if q == "angvel":
        return ctx.w
    if q == "angvel_offaxis":
        alpha = np.asarray(prm["axis"], dtype=float)
        along = (ctx.w @ alpha)[:, None] * alpha
        return ctx.w - along
    if q == "angvel_about":
        alpha = np.asarray(prm["axis"], dtype=float)
        return ctx.w @ alpha
    if q == "grf":
        return (ctx.grf * ~ctx.swing[:, :, None]).reshape(len(ctx.grf), 12)
    if q == "residual":
        return (ctx.residual * ctx.swing[:, :, None]).reshape(len(ctx.residual), 12)
    raise TaskError(f"rewards.{term.name}.quantity", f"unknown selector {q!r}")


def _phase_mask(term: RewardTerm, ctx: RewardContext) -> np.ndarray:
    if term.phase == "always":
        return np.ones(len(ctx.p), dtype=bool)
    if term.phase == "air":
        return ctx.swing.all(axis=1)
    if term.phase == "landing":
        return ctx.landing
    raise TaskError(f"rewards.{term.name}.phase", f"unknown phase filter {term.phase!r}")


@dataclass(frozen=True)
class RewardSpec:
    terms: tuple

    def evaluate(self, ctx: RewardContext):
        """Total reward (1 + sum positive) * (sum negative) plus a per-term breakdown."""
        n = len(ctx.p)
        pos = np.zeros(n)
        neg = np.zeros(n)
        breakdown = {}
        for term in self.terms:
            x = _quantity(term, ctx)
            if term.form == "exp":
                sq = x * x if x.ndim == 1 else np.einsum("nd,nd->n", x, x)
                r = term.a * np.exp(-term.b * sq)
            else:
                r = term.a * np.maximum(np.minimum(x, term.upper), term.lower)
            r = np.where(_phase_mask(term, ctx), r, 0.0)
            breakdown[term.name] = r
            if term.sign == "pos":
                pos += r
            else:
                neg += r
        total = (1.0 + pos) * neg
        return total, breakdown


def reward_eval(spec: RewardSpec, ctx: RewardContext):
    """Positive terms, negative terms, total, and the per-term breakdown."""
    total, breakdown = spec.evaluate(ctx)
    r_pos = [breakdown[t.name] for t in spec.terms if t.sign == "pos"]
    r_neg = [breakdown[t.name] for t in spec.terms if t.sign == "neg"]
    return r_pos, r_neg, total, breakdown


# ---------------------------------------------------------------------------
# Task files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommandRanges:
    linear_x: tuple = (0.0, 0.0)
    linear_y: tuple = (0.0, 0.0)
    yaw_rate: tuple = (0.0, 0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.zeros((n, 3))
        out[:, 0] = rng.uniform(self.linear_x[0], self.linear_x[1], size=n)
        out[:, 1] = rng.uniform(self.linear_y[0], self.linear_y[1], size=n)
        out[:, 2] = rng.uniform(self.yaw_rate[0], self.yaw_rate[1], size=n)
        return out


@dataclass(frozen=True)
class SuccessSpec:
    min_height: float = 0.15
    min_upright: float = 0.7
    max_vel_error: float | None = None


@dataclass(frozen=True)
class MotionTask:
    name: str
    family: str                    # gait | flip | wall
    duration: float
    plan: ContactPlan
    swing: SwingSpec
    rewards: RewardSpec
    keyframes: KeyframeTable | None
    commands: CommandRanges | None
    success: SuccessSpec
    ground_height: float = 0.0
    wall_x: float | None = None
    height_target: float = 0.28

    @property
    def has_commands(self) -> bool:
        return self.commands is not None


def _parse_axis_value(value, path: str) -> np.ndarray:
    if isinstance(value, str):
        sign = -1.0 if value.startswith("-") else 1.0
        name = value.lstrip("+-")
        if name not in _AXIS_BY_NAME:
            raise TaskError(path, f"unknown axis {value!r}")
        return sign * _AXIS_BY_NAME[name]
    vec = np.asarray(value, dtype=float)
    if vec.shape != (3,):
        raise TaskError(path, "axis must be a name like '-x' or a 3-vector")
    return vec


def _parse_plan(data: dict, duration: float) -> ContactPlan:
    kind = data.get("type")
    if kind == "periodic":
        stance = float(data.get("stance_duration", 0.0))
        swing = float(data.get("swing_duration", 0.0))
        if stance <= 0.0 or swing <= 0.0:
            raise TaskError("contact_plan", "periodic durations must be positive")
        offsets = np.zeros(4)
        for i, name in enumerate(FOOT_NAMES):
            offsets[i] = float(data.get("phase_offsets", {}).get(name, 0.0))
        return ContactPlan(duration=duration, periodic=True, stance_duration=stance,
                           swing_duration=swing, phase_offsets=offsets)
    if kind == "intervals":
        offset = float(data.get("clock_offset", 0.0))
        air = data.get("air", {})
        per_foot = []
        max_k = 1
        for name in FOOT_NAMES:
            spans = air.get(name, [])
            for j, (s, e) in enumerate(spans):
                if not 0.0 <= s < e:
                    raise TaskError(f"contact_plan.air.{name}[{j}]", "need 0 <= start < end")
                if e + offset > duration + 1e-9:
                    raise TaskError(f"contact_plan.air.{name}[{j}]", "interval exceeds duration")
            spans = sorted(spans)
            for (s1, e1), (s2, _) in zip(spans, spans[1:]):
                if s2 < e1:
                    raise TaskError(f"contact_plan.air.{name}", "overlapping air intervals")
            per_foot.append(spans)
            max_k = max(max_k, len(spans))
        arr = np.full((4, max_k, 2), np.inf)
        for i, spans in enumerate(per_foot):
            for j, (s, e) in enumerate(spans):
                arr[i, j] = (s, e)
        return ContactPlan(duration=duration, periodic=False, air_intervals=arr,
                           clock_offset=offset)
    raise TaskError("contact_plan.type", f"unknown plan type {kind!r}")


def _parse_swing(data: dict) -> SwingSpec:
    mode = data.get("mode")
    if mode not in ("gait_raibert", "flip_tuck", "wall_blend"):
        raise TaskError("swing.mode", f"unknown swing mode {mode!r}")
    kwargs = {"mode": mode}
    if "clearance" in data:
        kwargs["clearance"] = float(data["clearance"])
    if "raibert_gain" in data:
        kwargs["raibert_gain"] = float(data["raibert_gain"])
    if "tuck_points" in data:
        pts = np.asarray(data["tuck_points"], dtype=float)
        if pts.shape != (2, 3):
            raise TaskError("swing.tuck_points", "expected two 3-vectors")
        kwargs["tuck_points"] = pts
    if "local_points" in data:
        pts = np.asarray(data["local_points"], dtype=float)
        if pts.shape != (3, 3):
            raise TaskError("swing.local_points", "expected three 3-vectors")
        kwargs["local_points"] = pts
    return SwingSpec(**kwargs)


def _parse_rewards(items) -> RewardSpec:
    if not items:
        raise TaskError("rewards", "at least one reward term is required")
    terms = []
    for i, item in enumerate(items):
        path = f"rewards[{i}]"
        try:
            name = item["name"]
            sign = item["sign"]
            form = item["form"]
            a = float(item["a"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TaskError(path, f"missing or malformed field: {exc}") from None
        if sign not in ("pos", "neg"):
            raise TaskError(f"{path}.sign", f"expected pos or neg, got {sign!r}")
        if a <= 0.0:
            raise TaskError(f"{path}.a", "scale a must be positive")
        kwargs = dict(name=name, sign=sign, form=form, a=a,
                      quantity=item.get("quantity", ""),
                      params=dict(item.get("params", {})),
                      phase=item.get("phase", "always"))
        if form == "exp":
            b = float(item.get("b", -1.0))
            if b <= 0.0:
                raise TaskError(f"{path}.b", "exp form needs b > 0")
            kwargs["b"] = b
        elif form == "linear":
            try:
                u, l = float(item["u"]), float(item["l"])
            except (KeyError, TypeError, ValueError):
                raise TaskError(f"{path}", "linear form needs u and l") from None
            if u <= l:
                raise TaskError(f"{path}.u", "linear form needs u > l")
            kwargs["upper"], kwargs["lower"] = u, l
        else:
            raise TaskError(f"{path}.form", f"unknown form {form!r}")
        if "axis" in kwargs["params"] and kwargs["quantity"] in ("angvel_about", "angvel_offaxis"):
            kwargs["params"]["axis"] = _parse_axis_value(kwargs["params"]["axis"], f"{path}.params.axis")
        if "target" in kwargs["params"] and kwargs["quantity"] == "body_axis_error":
            kwargs["params"]["target"] = _parse_axis_value(kwargs["params"]["target"], f"{path}.params.target")
        if kwargs["phase"] not in ("always", "air", "landing"):
            raise TaskError(f"{path}.phase", f"unknown phase filter {kwargs['phase']!r}")
        term = RewardTerm(**kwargs)
        terms.append(term)
    return RewardSpec(terms=tuple(terms))


def _parse_keyframes(data, duration: float) -> KeyframeTable:
    frames = []
    for i, item in enumerate(data["phases"]):
        path = f"keyframes.phases[{i}]"
        p = np.asarray(item.get("p_target"), dtype=float)
        if p.shape != (3,):
            raise TaskError(f"{path}.p_target", "expected a 3-vector")
        axes = {}
        for ax, val in (item.get("R_target") or {}).items():
            if ax not in _AXIS_INDEX:
                raise TaskError(f"{path}.R_target.{ax}", "axis must be x, y or z")
            axes[ax] = _parse_axis_value(val, f"{path}.R_target.{ax}")
        frames.append(Keyframe(name=item.get("name", f"phase{i}"), p_target=p, axes=axes))
    durations = data.get("durations")
    if durations is None:
        durations = np.full(len(frames), duration / len(frames))
    else:
        durations = np.asarray(durations, dtype=float)
        if len(durations) != len(frames):
            raise TaskError("keyframes.durations", "one duration per phase required")
        if abs(durations.sum() - duration) > 1e-6:
            raise TaskError("keyframes.durations", "durations must sum to the task duration")
    return KeyframeTable(frames=tuple(frames), durations=durations)


def load_task(path) -> MotionTask:
    """Load and validate a motion task file."""
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise TaskError(str(path), "task file must be a mapping")
    try:
        name = data["name"]
        family = data["family"]
        duration = float(data["duration"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TaskError("header", f"missing or malformed field: {exc}") from None
    if family not in ("gait", "flip", "wall"):
        raise TaskError("family", f"unknown family {family!r}")
    if duration <= 0.0:
        raise TaskError("duration", "duration must be positive")

    plan = _parse_plan(data.get("contact_plan", {}), duration)
    swing = _parse_swing(data.get("swing", {}))
    rewards = _parse_rewards(data.get("rewards", []))

    keyframes = None
    if "keyframes" in data:
        keyframes = _parse_keyframes(data["keyframes"], duration)
    if swing.mode == "wall_blend" and keyframes is None:
        raise TaskError("keyframes", "wall_blend swing mode requires keyframes")

    commands = None
    if "commands" in data:
        c = data["commands"]
        commands = CommandRanges(
            linear_x=tuple(c.get("linear_x", (0.0, 0.0))),
            linear_y=tuple(c.get("linear_y", (0.0, 0.0))),
            yaw_rate=tuple(c.get("yaw_rate", (0.0, 0.0))),
        )

    s = data.get("success", {})
    success = SuccessSpec(
        min_height=float(s.get("min_height", 0.15)),
        min_upright=float(s.get("min_upright", 0.7)),
        max_vel_error=(float(s["max_vel_error"]) if "max_vel_error" in s else None),
    )

    terrain = data.get("terrain", {})
    wall = terrain.get("wall")
    wall_x = float(wall["x"]) if wall else None

    # Reward selectors that need keyframe targets must have them.
    for term in rewards.terms:
        if term.quantity.startswith("keyframe_") and keyframes is None:
            raise TaskError(f"rewards.{term.name}", "keyframe selector without keyframes section")

    return MotionTask(
        name=name, family=family, duration=duration, plan=plan, swing=swing,
        rewards=rewards, keyframes=keyframes, commands=commands, success=success,
        ground_height=float(terrain.get("ground_height", 0.0)), wall_x=wall_x,
        height_target=float(data.get("height_target", 0.28)),
    )


def builtin_task_path(name: str) -> Path:
    """Path of a task file shipped with the package."""
    return Path(__file__).parent / "assets" / "tasks" / f"{name}.yaml"


def resolve_task(name_or_path) -> MotionTask:
    p = Path(name_or_path)
    if p.exists():
        return load_task(p)
    builtin = builtin_task_path(str(name_or_path))
    if builtin.exists():
        return load_task(builtin)
    raise FileNotFoundError(f"no task file or builtin task named {name_or_path!r}")
