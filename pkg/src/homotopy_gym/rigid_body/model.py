"""Articulated quadruped model: link tree, file loader, flat packing for kernels."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from ..geom import composite_inertia

N_LEG_JOINTS = 12


class ModelError(ValueError):
    """Invalid model description, with the offending field named."""


def rpy_matrix(rpy) -> np.ndarray:
    """Rotation from roll-pitch-yaw (extrinsic x-y-z, i.e. Rz @ Ry @ Rx)."""
    r, p, y = [float(a) for a in rpy]
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


@dataclass(frozen=True)
class Link:
    name: str
    parent: int                   # -1 for the floating root
    joint_type: str               # floating | revolute
    axis: np.ndarray              # (3,) unit, link frame
    origin_xyz: np.ndarray        # (3,) joint origin in the parent frame
    origin_rpy: np.ndarray        # (3,)
    mass: float
    inertia: np.ndarray           # (3, 3) about the link COM, link frame
    com: np.ndarray               # (3,) COM offset in the link frame


@dataclass(frozen=True)
class ArticulatedModel:
    """Floating-base kinematic tree with per-link inertial parameters.

    Link 0 is the floating trunk; the 12 revolute joints follow in
    FL/FR/RL/RR (hip, thigh, calf) order for the standard quadruped.
    """

    links: tuple
    foot_links: np.ndarray        # (4,) link indices
    foot_offsets: np.ndarray      # (4, 3) foot point in the foot-link frame
    foot_radius: float
    workspace_radius: float
    torque_limit: float
    mu: float
    gravity: np.ndarray           # (3,)
    nominal_base_height: float
    nominal_joints: np.ndarray    # (12,)
    trunk_collision_height: float = 0.06
    knee_collision_height: float = 0.0
    name: str = "quadruped"

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        return self.n_links - 1

    @property
    def masses(self) -> np.ndarray:
        return np.array([l.mass for l in self.links])

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def hip_offsets(self) -> np.ndarray:
        """Base-frame positions of the four hip-pitch joints (thigh joint origins)."""
        out = np.zeros((4, 3))
        for f in range(4):
            thigh = self.links[int(self.foot_links[f]) - 1]
            abad = self.links[thigh.parent]
            out[f] = abad.origin_xyz + rpy_matrix(abad.origin_rpy) @ thigh.origin_xyz
        return out

    def validate(self) -> None:
        links = self.links
        if not links or links[0].joint_type != "floating" or links[0].parent != -1:
            raise ModelError("links[0]: root must be a floating-joint link")
        n_rev = 0
        for i, link in enumerate(links[1:], start=1):
            if link.joint_type != "revolute":
                raise ModelError(f"links[{i}].joint: only revolute child joints are supported")
            if not 0 <= link.parent < i:
                raise ModelError(f"links[{i}].parent: parents must precede children")
            n_rev += 1
        if n_rev != N_LEG_JOINTS:
            raise ModelError(f"expected {N_LEG_JOINTS} revolute joints, found {n_rev}")
        if len(self.foot_links) != 4:
            raise ModelError("feet: exactly four foot links are required")
        for i, link in enumerate(links):
            if link.mass <= 0.0:
                raise ModelError(f"links[{i}].mass: must be positive")
            if np.linalg.norm(link.inertia - link.inertia.T) > 1e-12:
                raise ModelError(f"links[{i}].inertia: not symmetric")
            if np.min(np.linalg.eigvalsh(link.inertia)) <= 0.0:
                raise ModelError(f"links[{i}].inertia: not positive definite")
        if not (self.workspace_radius > self.foot_radius > 0.0):
            raise ModelError("workspace_radius > foot_radius > 0 required")
        if self.mu <= 0.0:
            raise ModelError("friction coefficient must be positive")
        if self.torque_limit <= 0.0:
            raise ModelError("torque_limit must be positive")

    def pack(self) -> "PackedModel":
        cached = getattr(self, "_packed", None)
        if cached is not None:
            return cached
        nl = self.n_links
        parent = np.array([l.parent for l in self.links], dtype=np.int64)
        axis = np.stack([l.axis for l in self.links]).astype(np.float64)
        tree_pos = np.stack([l.origin_xyz for l in self.links]).astype(np.float64)
        tree_rot = np.stack([rpy_matrix(l.origin_rpy) for l in self.links])
        mass = self.masses.astype(np.float64)
        inertia = np.stack([l.inertia for l in self.links]).astype(np.float64)
        com = np.stack([l.com for l in self.links]).astype(np.float64)
        packed = PackedModel(
            n_links=nl, parent=parent, axis=axis, tree_pos=tree_pos, tree_rot=tree_rot,
            mass=mass, inertia=inertia, com=com,
            foot_link=self.foot_links.astype(np.int64),
            foot_offset=self.foot_offsets.astype(np.float64),
            foot_radius=float(self.foot_radius),
            torque_limit=float(self.torque_limit),
            gravity=self.gravity.astype(np.float64),
            trunk_collision_height=float(self.trunk_collision_height),
            knee_collision_height=float(self.knee_collision_height),
        )
        object.__setattr__(self, "_packed", packed)
        return packed


@dataclass(frozen=True)
class PackedModel:
    """Flat-array view of an ArticulatedModel consumed by the numba kernels."""

    n_links: int
    parent: np.ndarray
    axis: np.ndarray
    tree_pos: np.ndarray
    tree_rot: np.ndarray
    mass: np.ndarray
    inertia: np.ndarray
    com: np.ndarray
    foot_link: np.ndarray
    foot_offset: np.ndarray
    foot_radius: float
    torque_limit: float
    gravity: np.ndarray
    trunk_collision_height: float
    knee_collision_height: float


@dataclass(frozen=True)
class ContactParams:
    """Regularized compliant contact: spring-damper normal, smoothed Coulomb."""

    k_n: float = 3.0e4            # N/m
    d_n: float = 300.0            # N s/m
    mu: float = 0.6
    v_slip: float = 0.01          # m/s tangential regularization

    def __post_init__(self):
        for name in ("k_n", "d_n", "mu", "v_slip"):
            if getattr(self, name) <= 0.0:
                raise ModelError(f"contact parameter {name} must be positive")


def contact_force(penetration: float, normal_velocity: float,
                  tangential_velocity: np.ndarray, params: ContactParams) -> np.ndarray:
    """Contact force in a frame whose z axis is the surface normal.

    Penetration >= 0 means touching; separated contacts carry no force and
    the normal force never pulls.
    """
    if penetration < 0.0:
        return np.zeros(3)
    f_n = max(0.0, params.k_n * penetration - params.d_n * normal_velocity)
    v_t = np.asarray(tangential_velocity, dtype=float)
    speed = max(float(np.linalg.norm(v_t)), params.v_slip)
    f_t = -params.mu * f_n * v_t / speed
    return np.array([f_t[0], f_t[1], f_n])


def _parse_link(item: dict, index_by_name: dict, path: str) -> Link:
    try:
        name = item["name"]
        mass = float(item["mass"])
        inertia6 = [float(x) for x in item["inertia"]]
        com = np.asarray(item.get("com", (0.0, 0.0, 0.0)), dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"{path}: missing or malformed field: {exc}") from None
    if len(inertia6) != 6:
        raise ModelError(f"{path}.inertia: expected [ixx, iyy, izz, ixy, ixz, iyz]")
    ixx, iyy, izz, ixy, ixz, iyz = inertia6
    inertia = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])

    parent_name = item.get("parent")
    if parent_name is None:
        return Link(name=name, parent=-1, joint_type="floating",
                    axis=np.zeros(3), origin_xyz=np.zeros(3), origin_rpy=np.zeros(3),
                    mass=mass, inertia=inertia, com=com)
    if parent_name not in index_by_name:
        raise ModelError(f"{path}.parent: unknown link {parent_name!r}")
    axis = np.asarray(item.get("axis", (0.0, 0.0, 1.0)), dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-9:
        raise ModelError(f"{path}.axis: zero axis")
    return Link(
        name=name, parent=index_by_name[parent_name], joint_type=item.get("joint", "revolute"),
        axis=axis / n,
        origin_xyz=np.asarray(item.get("origin_xyz", (0.0, 0.0, 0.0)), dtype=float),
        origin_rpy=np.asarray(item.get("origin_rpy", (0.0, 0.0, 0.0)), dtype=float),
        mass=mass, inertia=inertia, com=com,
    )


def load_model(path) -> ArticulatedModel:
    """Load, validate and report on a robot description file."""
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh)
    links = []
    index_by_name: dict = {}
    for i, item in enumerate(data.get("links", [])):
        link = _parse_link(item, index_by_name, f"links[{i}]")
        index_by_name[link.name] = i
        links.append(link)

    feet = data.get("feet", [])
    if len(feet) != 4:
        raise ModelError("feet: exactly four entries required")
    foot_links = np.zeros(4, dtype=int)
    foot_offsets = np.zeros((4, 3))
    for f, item in enumerate(feet):
        if item["link"] not in index_by_name:
            raise ModelError(f"feet[{f}].link: unknown link {item['link']!r}")
        foot_links[f] = index_by_name[item["link"]]
        foot_offsets[f] = np.asarray(item.get("offset", (0.0, 0.0, 0.0)), dtype=float)

    nominal = data.get("nominal_pose", {})
    joints = np.zeros(12)
    for name, angle in nominal.get("joints", {}).items():
        if name not in index_by_name:
            raise ModelError(f"nominal_pose.joints.{name}: unknown link")
        joints[index_by_name[name] - 1] = float(angle)

    model = ArticulatedModel(
        links=tuple(links),
        foot_links=foot_links,
        foot_offsets=foot_offsets,
        foot_radius=float(data.get("foot_radius", 0.02)),
        workspace_radius=float(data.get("workspace_radius", 0.35)),
        torque_limit=float(data.get("torque_limit", 23.7)),
        mu=float(data.get("friction", 0.6)),
        gravity=np.asarray(data.get("gravity", (0.0, 0.0, -9.81)), dtype=float),
        nominal_base_height=float(nominal.get("base_height", 0.28)),
        nominal_joints=joints,
        trunk_collision_height=float(data.get("trunk_collision_height", 0.06)),
        knee_collision_height=float(data.get("knee_collision_height", 0.0)),
        name=data.get("name", path.stem),
    )
    model.validate()
    return model


def with_inertial(model: ArticulatedModel, masses, inertias, coms) -> ArticulatedModel:
    """Copy of the model with per-link inertial parameters replaced."""
    links = tuple(
        replace(link, mass=float(m), inertia=np.asarray(I, dtype=float),
                com=np.asarray(c, dtype=float))
        for link, m, I, c in zip(model.links, masses, inertias, coms)
    )
    return replace(model, links=links)


def builtin_model_path() -> Path:
    return Path(__file__).parent.parent / "assets" / "quadruped.yaml"


def nominal_composite(model: ArticulatedModel):
    """Composite (mass, inertia about COM, COM) in the base frame at the nominal pose.

    Import is deferred to keep model a leaf module for the kernels.
    """
    from .kinematics import forward_kinematics

    q = nominal_q(model)
    R_w, p_w, _ = forward_kinematics(model, q)
    parts = []
    for i, link in enumerate(model.links):
        c_world = p_w[i] + R_w[i] @ link.com
        I_world = R_w[i] @ link.inertia @ R_w[i].T
        parts.append((link.mass, I_world, c_world))
    m, I, c = composite_inertia(parts)
    return m, I, c - q_base_pos(q)


def nominal_q(model: ArticulatedModel) -> np.ndarray:
    """Generalized position at the nominal standing pose: [p(3), R(9, row-major), joints(12)]."""
    q = np.zeros(3 + 9 + 12)
    q[2] = model.nominal_base_height
    q[3:12] = np.eye(3).reshape(-1)
    q[12:] = model.nominal_joints
    return q


def q_base_pos(q: np.ndarray) -> np.ndarray:
    return q[..., 0:3]


def q_base_rot(q: np.ndarray) -> np.ndarray:
    return q[..., 3:12].reshape(q.shape[:-1] + (3, 3))


def q_joints(q: np.ndarray) -> np.ndarray:
    return q[..., 12:]
