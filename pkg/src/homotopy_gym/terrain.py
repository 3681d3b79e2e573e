"""Terrain as half-spaces: flat ground plus an optional vertical wall plane."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Terrain:
    """Flat ground at z = ground_height; optional wall filling x > wall_x.

    The wall's inward normal is -x, i.e. it faces back into the free space
    where the robot operates.
    """

    ground_height: float = 0.0
    wall_x: float | None = None

    def signed_distance(self, points: np.ndarray):
        """Distance to the nearest surface and that surface's unit normal.

        `points` has shape (..., 3); returns (dist (...,), normal (..., 3)).
        Positive distance means outside the solid.
        """
        points = np.asarray(points, dtype=float)
        dist = points[..., 2] - self.ground_height
        normal = np.zeros(points.shape)
        normal[..., 2] = 1.0
        if self.wall_x is not None:
            wall_dist = self.wall_x - points[..., 0]
            closer = wall_dist < dist
            dist = np.where(closer, wall_dist, dist)
            normal[closer] = np.array([-1.0, 0.0, 0.0])
        return dist, normal

    def in_contact(self, points: np.ndarray, radius: float) -> np.ndarray:
        dist, _ = self.signed_distance(points)
        return dist < radius


def detect_contact(foot_pos: np.ndarray, foot_radius: float, terrain: Terrain):
    """A foot touches when its center is closer than its radius to a surface."""
    return terrain.in_contact(foot_pos, foot_radius)
