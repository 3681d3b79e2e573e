"""Reference-kinematics in plain numpy: FK, foot Jacobians, COM quantities.

The hot simulation paths use the compiled kernels; these versions are the
readable reference the kernels are tested against, and serve loaders and
evaluation code directly.
"""

from __future__ import annotations

import numpy as np

from ..geom import skew, so3_exp
from .model import ArticulatedModel, q_base_pos, q_base_rot, q_joints


def forward_kinematics(model: ArticulatedModel, q: np.ndarray):
    """World rotation and origin of every link frame, plus foot points.

    Returns (R_w (n_links,3,3), p_w (n_links,3), feet (4,3)).
    """
    nl = model.n_links
    R_w = np.zeros((nl, 3, 3))
    p_w = np.zeros((nl, 3))
    R_w[0] = q_base_rot(q)
    p_w[0] = q_base_pos(q)
    joints = q_joints(q)
    for i, link in enumerate(model.links[1:], start=1):
        from .model import rpy_matrix

        par = link.parent
        p_w[i] = p_w[par] + R_w[par] @ link.origin_xyz
        R_w[i] = R_w[par] @ rpy_matrix(link.origin_rpy) @ so3_exp(link.axis * joints[i - 1])
    feet = np.zeros((len(model.foot_links), 3))
    for f in range(len(model.foot_links)):
        k = int(model.foot_links[f])
        feet[f] = p_w[k] + R_w[k] @ model.foot_offsets[f]
    return R_w, p_w, feet


def chain_to_root(model: ArticulatedModel, link: int):
    chain = []
    while link > 0:
        chain.append(link)
        link = model.links[link].parent
    return chain[::-1]


def foot_jacobian(model: ArticulatedModel, q: np.ndarray, foot_index: int) -> np.ndarray:
    """World-frame linear-velocity Jacobian of the foot point, shape (3, 18).

    Column layout matches qd = [base linear (world), base angular (world),
    12 joint rates].
    """
    R_w, p_w, feet = forward_kinematics(model, q)
    pf = feet[foot_index]
    J = np.zeros((3, 6 + model.n_joints))
    J[:, 0:3] = np.eye(3)
    J[:, 3:6] = -skew(pf - p_w[0])
    for k in chain_to_root(model, int(model.foot_links[foot_index])):
        axis_world = R_w[k] @ model.links[k].axis
        J[:, 6 + k - 1] = np.cross(axis_world, pf - p_w[k])
    return J


def link_com_states(model: ArticulatedModel, q: np.ndarray, qd: np.ndarray):
    """Per-link COM positions/velocities and angular velocities (world frame)."""
    R_w, p_w, _ = forward_kinematics(model, q)
    nl = model.n_links
    w = np.zeros((nl, 3))
    v = np.zeros((nl, 3))    # velocity of the link frame origin
    w[0] = qd[3:6]
    v[0] = qd[0:3]
    for i, link in enumerate(model.links[1:], start=1):
        par = link.parent
        v[i] = v[par] + np.cross(w[par], p_w[i] - p_w[par])
        w[i] = w[par] + (R_w[i] @ link.axis) * qd[6 + i - 1]
    com = np.zeros((nl, 3))
    vcom = np.zeros((nl, 3))
    for i, link in enumerate(model.links):
        com[i] = p_w[i] + R_w[i] @ link.com
        vcom[i] = v[i] + np.cross(w[i], com[i] - p_w[i])
    return com, vcom, w, R_w


def system_com(model: ArticulatedModel, q: np.ndarray, qd: np.ndarray):
    """Total COM position and velocity."""
    com, vcom, _, _ = link_com_states(model, q, qd)
    m = model.masses
    total = m.sum()
    return (m[:, None] * com).sum(0) / total, (m[:, None] * vcom).sum(0) / total


def angular_momentum_about_com(model: ArticulatedModel, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """World-frame angular momentum of the whole mechanism about its COM."""
    com, vcom, w, R_w = link_com_states(model, q, qd)
    m = model.masses
    c_total = (m[:, None] * com).sum(0) / m.sum()
    v_total = (m[:, None] * vcom).sum(0) / m.sum()
    L = np.zeros(3)
    for i, link in enumerate(model.links):
        I_w = R_w[i] @ link.inertia @ R_w[i].T
        L += I_w @ w[i] + link.mass * np.cross(com[i] - c_total, vcom[i] - v_total)
    return L


def mechanical_energy(model: ArticulatedModel, q: np.ndarray, qd: np.ndarray) -> float:
    """Kinetic plus gravitational potential energy."""
    com, vcom, w, R_w = link_com_states(model, q, qd)
    g = model.gravity
    e = 0.0
    for i, link in enumerate(model.links):
        I_w = R_w[i] @ link.inertia @ R_w[i].T
        e += 0.5 * link.mass * float(vcom[i] @ vcom[i])
        e += 0.5 * float(w[i] @ I_w @ w[i])
        e -= link.mass * float(g @ com[i])
    return e
