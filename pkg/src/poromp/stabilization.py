"""Pressure smoothing, F-bar scaling and patch-wise elastic averaging.

The water phase is stabilized by a node-wise map/remap of pore pressure;
the soil phase by rescaling the volumetric part of the incremental
deformation gradient (standard F-bar) and, in the modified variant, by
additionally averaging the elastic Jacobian over fixed 1.5h patches.
All operators are mass-weighted and reproduce constant fields exactly.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalFailure
from .grid import evaluate_bspline_many


def nodewise_smooth(values, masses, ids, S, n_nodes):
    """Map a particle scalar to the nodes and back, mass-weighted.

    Nodes that receive no mass are skipped; since every shape weight
    pointing at them is zero, the remap is unaffected.
    """
    flat = ids.ravel()
    w = (S * masses[:, None]).ravel()
    M = np.bincount(flat, weights=w, minlength=n_nodes)
    num = np.bincount(flat, weights=w * np.repeat(values, S.shape[1]),
                      minlength=n_nodes)
    nodal = np.divide(num, M, out=np.zeros_like(num), where=M > 0.0)
    return (S * nodal[ids]).sum(axis=1)


def _shapes_for(points, grid, shapes):
    if shapes is not None:
        return shapes
    ids, S, _ = evaluate_bspline_many(grid, points.x)
    return ids, S


def smooth_pressure(water, grid, shapes=None):
    """Node-wise smoothed pore pressure per water point.

    ``shapes`` may carry precomputed ``(ids, S)`` from the solver; the
    particle array itself is left untouched.
    """
    ids, S = _shapes_for(water, grid, shapes)
    return nodewise_smooth(water.p, water.m, ids, S, grid.n_nodes)


def stabilize_jacobian_nodewise(soil, field, grid, shapes=None):
    """Same map/remap operator applied to a soil scalar (J or ΔJ)."""
    ids, S = _shapes_for(soil, grid, shapes)
    return nodewise_smooth(np.asarray(field, dtype=float), soil.m,
                           ids, S, grid.n_nodes)


def fbar_increment(dF, dJ, dJ_bar, dof=2):
    """Volumetrically rescaled increment ΔF̄ = (ΔJ̄/ΔJ)^{1/dof}·ΔF.

    With ``dof=2`` only the in-plane rows are scaled (plane strain keeps
    the out-of-plane stretch at unity), so det ΔF̄ = ΔJ̄ exactly.
    """
    if dJ <= 0.0 or dJ_bar <= 0.0:
        raise NumericalFailure(
            f"inverted element: incremental Jacobians ΔJ={dJ}, ΔJ̄={dJ_bar}")
    s = (dJ_bar / dJ) ** (1.0 / dof)
    out = np.array(dF, dtype=float, copy=True)
    out[:dof, :] *= s
    return out


def fbar_increment_many(dF, dJ, dJ_bar, dof=2):
    """Vectorized F-bar over stacked increments (n,3,3)."""
    if np.any(dJ <= 0.0) or np.any(dJ_bar <= 0.0):
        bad = np.flatnonzero((dJ <= 0.0) | (dJ_bar <= 0.0))
        raise NumericalFailure(
            f"inverted element at particles {bad[:10].tolist()}")
    s = (dJ_bar / dJ) ** (1.0 / dof)
    out = np.array(dF, dtype=float, copy=True)
    out[:, :dof, :] *= s[:, None, None]
    return out


@dataclass(frozen=True)
class PatchTiling:
    """Fixed tiling of the domain into square averaging patches.

    The tiling is anchored at the grid origin and built once; membership
    is looked up from the current particle position, so particles change
    patches as they advect while the geometry itself never moves.
    """

    origin: np.ndarray
    h_patch: float
    counts: tuple

    @classmethod
    def from_grid(cls, grid, factor=1.5):
        h_patch = factor * grid.h
        counts = tuple(int(math.ceil(grid.extent[a] / h_patch - 1e-12))
                       for a in range(2))
        return cls(origin=grid.origin.copy(), h_patch=h_patch, counts=counts)

    @property
    def n_patches(self):
        return self.counts[0] * self.counts[1]

    def patch_of(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.floor((x - self.origin) / self.h_patch).astype(int)
        for a in range(2):
            idx[:, a] = np.clip(idx[:, a], 0, self.counts[a] - 1)
        return idx[:, 0] * self.counts[1] + idx[:, 1]


def patch_average_Be(soil, tiling, B_e=None):
    """Patch-averaged elastic tensor B̄_e = (J̄^e/J^e)^{2/3}·B_e.

    J^e = sqrt(det B_e); J̄^e is the mass-weighted patch mean.  The
    rescaling leaves the deviatoric direction of B_e untouched and makes
    every particle's elastic Jacobian equal to its patch mean.  ``B_e``
    defaults to the container's stored tensor (the previous converged
    state is what gets averaged).
    """
    if B_e is None:
        B_e = soil.B_e
    if len(soil) == 0:
        return np.array(B_e, copy=True)
    det = np.linalg.det(B_e)
    if np.any(det <= 0.0):
        bad = np.flatnonzero(det <= 0.0)
        raise NumericalFailure(
            f"non-positive elastic Jacobian at particles {bad[:10].tolist()}")
    Je = np.sqrt(det)
    pid = tiling.patch_of(soil.x)
    mJ = np.bincount(pid, weights=soil.m * Je, minlength=tiling.n_patches)
    M = np.bincount(pid, weights=soil.m, minlength=tiling.n_patches)
    Je_bar = np.divide(mJ, M, out=np.ones_like(mJ), where=M > 0.0)
    scale = (Je_bar[pid] / Je) ** (2.0 / 3.0)
    return B_e * scale[:, None, None]
