"""Mass/inertia redistribution between trunk and legs along a continuation path.

The continuation parameter lambda is the ratio of current leg mass to the
full-model leg mass. Leg links scale linearly with lambda while the trunk
interpolates between the whole-robot composite properties (at the nominal
standing pose) and its own full values, keeping the total mass constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rigid_body.model import ArticulatedModel, nominal_composite, with_inertial

LAMBDA_MIN = 0.01
LAMBDA_MAX = 1.0


@dataclass(frozen=True)
class HomotopyParams:
    lam: float = LAMBDA_MAX
    total_iterations: int = 900
    dt_nominal: float = 2e-3
    dt_min_fraction: float = 0.25

    def __post_init__(self):
        if not LAMBDA_MIN <= self.lam <= LAMBDA_MAX:
            raise ValueError(f"lambda must lie in [{LAMBDA_MIN}, {LAMBDA_MAX}]")
        if self.total_iterations <= 0:
            raise ValueError("total_iterations must be positive")
        if not 0.0 < self.dt_min_fraction <= 1.0:
            raise ValueError("dt_min_fraction must lie in (0, 1]")


def lambda_schedule(iteration: int, total: int = 900) -> float:
    """Linear ramp from 0.01 at iteration 0 to 1.0 at `total`, then constant."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    frac = min(iteration / total, 1.0)
    return LAMBDA_MIN + (LAMBDA_MAX - LAMBDA_MIN) * frac


def timestep_schedule(lam: float, dt_nominal: float, dt_min_fraction: float = 0.25) -> float:
    """Timestep refinement for small lambda: affine in lambda, nominal at 1."""
    if not LAMBDA_MIN <= lam <= LAMBDA_MAX:
        raise ValueError(f"lambda must lie in [{LAMBDA_MIN}, {LAMBDA_MAX}]")
    return dt_nominal * (dt_min_fraction + (1.0 - dt_min_fraction) * lam)


def interpolate_model(full: ArticulatedModel, lam: float) -> ArticulatedModel:
    """Model with leg mass/inertia scaled by lambda and the trunk interpolated
    between the nominal-pose composite and its full values.

    Geometry (joint placements, link lengths, COM offsets) is unchanged; the
    total mass is constant by construction. lambda = 1 returns the full
    parameters exactly.
    """
    if not LAMBDA_MIN <= lam <= LAMBDA_MAX:
        raise ValueError(f"lambda must lie in [{LAMBDA_MIN}, {LAMBDA_MAX}]")
    m_comp, I_comp, c_comp = nominal_composite(full)
    trunk = full.links[0]
    masses = [lam * trunk.mass + (1.0 - lam) * m_comp]
    inertias = [lam * trunk.inertia + (1.0 - lam) * I_comp]
    coms = [lam * trunk.com + (1.0 - lam) * c_comp]
    for link in full.links[1:]:
        masses.append(lam * link.mass)
        inertias.append(lam * link.inertia)
        coms.append(link.com)
    return with_inertial(full, masses, inertias, coms)
