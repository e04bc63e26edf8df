"""Particle state containers and geometric seeding.

The two phases live in separate structure-of-array containers so the
solver loops stay vectorized.  Soil points carry mass, effective stress
and the constitutive state; water points carry volume, velocity and pore
pressure.  Masses are set once at seeding and never touched again, which
is what makes the conservation checks trivial identities.

Plane strain with unit depth: volumes are per metre out of plane.
"""

from dataclasses import dataclass, field

import numpy as np
import shapely

from .constants import GRAVITY, RHO_WATER
from .errors import ConfigurationError


@dataclass(frozen=True)
class MixtureConstants:
    """Densities and gravitational constants of the mixture.

    ``g_const`` enters the Darcy drag and must stay positive even when
    the body force is switched off (weightless consolidation still has
    drag).
    """

    rho_s: float = 2650.0
    rho_w: float = RHO_WATER
    g_const: float = GRAVITY
    body_force: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.rho_s <= 0.0 or self.rho_w <= 0.0:
            raise ConfigurationError("phase densities must be positive")
        if self.g_const <= 0.0:
            raise ConfigurationError(
                "the drag constant g stays positive even for zero gravity")


def _zeros(n, *shape):
    return np.zeros((n,) + shape)


@dataclass
class SoilPoints:
    """Soil-skeleton material points (structure of arrays).

    ``m`` is the constant particle mass (1-n0) rho_s V0.  ``vel`` is the
    velocity; the lowercase ``v``/``v0`` pair holds specific volumes for
    the critical-state model, following triaxial usage.  ``J`` is the
    volume ratio Vt/V0 tracked from the raw incremental Jacobian.
    """

    X: np.ndarray
    x: np.ndarray
    m: np.ndarray
    V0: np.ndarray
    Vt: np.ndarray
    vel: np.ndarray
    sigma_eff: np.ndarray
    tau: np.ndarray
    n0: np.ndarray
    n_por: np.ndarray
    k_hyd: np.ndarray
    k_C1: np.ndarray
    B_e: np.ndarray
    Ep_d: np.ndarray
    p_i: np.ndarray
    v: np.ndarray
    v0: np.ndarray
    p0: np.ndarray
    eps_e_v0: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    @property
    def J(self):
        return self.Vt / self.V0

    def total_mass(self):
        return float(self.m.sum())


@dataclass
class WaterPoints:
    """Pore-water material points.

    ``m`` is the conserved effective mass n0 rho_w V0; the current
    volume satisfies Vt = (n0/n_w) V0 as porosity is projected over from
    the soil.  ``p`` is the pore pressure, tension positive.
    """

    X: np.ndarray
    x: np.ndarray
    m: np.ndarray
    V0: np.ndarray
    Vt: np.ndarray
    vel: np.ndarray
    p: np.ndarray
    n0: np.ndarray
    n_w: np.ndarray
    k_w: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def total_mass(self):
        return float(self.m.sum())


def empty_water_points():
    """Zero-length water container for dry (single-phase) runs."""
    z = np.zeros(0)
    z2 = np.zeros((0, 2))
    return WaterPoints(X=z2.copy(), x=z2.copy(), m=z.copy(), V0=z.copy(),
                       Vt=z.copy(), vel=z2.copy(), p=z.copy(), n0=z.copy(),
                       n_w=z.copy(), k_w=z.copy())


def _subcell_lattice(grid, ppc):
    """Candidate positions at regular sub-cell centers over the whole grid."""
    step = grid.h / ppc
    axes = [grid.origin[a] + (np.arange(grid.cells[a] * ppc) + 0.5) * step
            for a in range(2)]
    xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def seed_region(geometry, grid, ppc, phase, mix, n0, k0, v0=None):
    """Fill a polygonal region with material points on the sub-cell lattice.

    ``geometry`` is a shapely polygon (or a coordinate sequence, which is
    wrapped into one).  Points sit at the ppc*ppc sub-cell centers of each
    grid cell, carry volume (h/ppc)^2 and masses from the phase density
    and initial porosity.  ``v0`` (specific volume) defaults to 1/(1-n0);
    critical-state scenarios override it since the two are calibrated
    independently.
    """
    if ppc not in (2, 3, 4):
        raise ConfigurationError(f"ppc must be 2, 3 or 4, got {ppc}")
    if phase not in ("soil", "water"):
        raise ConfigurationError(f"unknown particle phase '{phase}'")
    if not (0.0 < n0 < 1.0):
        raise ConfigurationError("initial porosity must lie in (0, 1)")
    if k0 <= 0.0:
        raise ConfigurationError("initial conductivity must be positive")
    if not isinstance(geometry, shapely.Geometry):
        geometry = shapely.Polygon(geometry)
    if geometry.is_empty:
        x = np.empty((0, 2))
    else:
        lo = grid.origin - 1e-9 * grid.h
        hi = grid.origin + grid.extent + 1e-9 * grid.h
        bounds = geometry.bounds
        if (bounds[0] < lo[0] or bounds[1] < lo[1]
                or bounds[2] > hi[0] or bounds[3] > hi[1]):
            raise ConfigurationError(
                f"seed geometry bounds {bounds} leave the grid domain")
        cand = _subcell_lattice(grid, ppc)
        # the body is a closed region: lattice points on the boundary are in
        keep = shapely.intersects_xy(geometry, cand[:, 0], cand[:, 1])
        x = cand[keep]
    n = x.shape[0]
    vol = (grid.h / ppc) ** 2
    V0 = np.full(n, vol)
    if phase == "soil":
        if v0 is None:
            v0 = 1.0 / (1.0 - n0)
        c1 = k0 * (1.0 - n0) ** 2 / n0 ** 3
        eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        return SoilPoints(
            X=x.copy(), x=x, m=(1.0 - n0) * mix.rho_s * V0,
            V0=V0, Vt=V0.copy(), vel=_zeros(n, 2),
            sigma_eff=_zeros(n, 3, 3), tau=_zeros(n, 3, 3),
            n0=np.full(n, n0), n_por=np.full(n, n0),
            k_hyd=np.full(n, k0), k_C1=np.full(n, c1),
            B_e=eye, Ep_d=_zeros(n), p_i=_zeros(n),
            v=np.full(n, v0), v0=np.full(n, v0),
            p0=_zeros(n), eps_e_v0=_zeros(n))
    return WaterPoints(
        X=x.copy(), x=x, m=n0 * mix.rho_w * V0,
        V0=V0, Vt=V0.copy(), vel=_zeros(n, 2), p=_zeros(n),
        n0=np.full(n, n0), n_w=np.full(n, n0), k_w=np.full(n, k0))
