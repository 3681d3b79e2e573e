"""Articulated full-body quadruped simulation."""

from .model import (
    ArticulatedModel,
    ContactParams,
    Link,
    ModelError,
    PackedModel,
    builtin_model_path,
    contact_force,
    load_model,
    nominal_composite,
    nominal_q,
)
from .kinematics import foot_jacobian, forward_kinematics
from .dynamics import convert_actions, forward_dynamics, fullbody_step, mass_matrix

__all__ = [
    "ArticulatedModel", "ContactParams", "Link", "ModelError", "PackedModel",
    "builtin_model_path", "contact_force", "load_model", "nominal_composite",
    "nominal_q", "foot_jacobian", "forward_kinematics", "convert_actions",
    "forward_dynamics", "fullbody_step", "mass_matrix",
]
