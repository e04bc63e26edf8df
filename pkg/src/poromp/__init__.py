"""Stabilized semi-implicit two-phase material point method for saturated soil.

The package couples a soil and a water phase on a background grid of
quadratic B-splines, solves the pore-pressure increment implicitly on that
grid, and stabilizes the low-order pair with pressure smoothing, node-wise
Jacobian smoothing and a patch-based modified F-bar treatment of the
elastic tensors.
"""

__version__ = "0.1.0"

from .errors import ConfigurationError, NumericalFailure, OutOfDomainError
from .grid import build_grid
from .particles import (
    MixtureConstants,
    SoilPoints,
    WaterPoints,
    empty_water_points,
    seed_region,
)
from .constitutive import MaterialModel
from .solver import (
    TractionLoad,
    World,
    compute_critical_dt,
    settle_under_gravity,
    step,
)

__all__ = [
    "ConfigurationError",
    "NumericalFailure",
    "OutOfDomainError",
    "build_grid",
    "MixtureConstants",
    "SoilPoints",
    "WaterPoints",
    "empty_water_points",
    "seed_region",
    "MaterialModel",
    "TractionLoad",
    "World",
    "compute_critical_dt",
    "settle_under_gravity",
    "step",
    "__version__",
]
