"""Legged-robot dynamics and continuation-learning toolkit.

Trains motion policies on a single-rigid-body model and transfers them to a
full articulated quadruped through a mass/inertia homotopy.
"""

__version__ = "0.1.0"
