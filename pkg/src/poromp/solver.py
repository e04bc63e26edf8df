"""Semi-implicit fractional-step cycle for the two-phase material point grid.

One time step runs ten stages on a fixed background grid:

1.  evaluate shape functions at the start-of-step particle positions
2.  gather mass, velocity, porosity and conductivity to the nodes (P2N)
3.  explicit water momentum predictor with implicit Darcy drag
4.  explicit soil momentum predictor, coupled through the water increment
5.  pressure Poisson solve enforcing mixture incompressibility, with
    free-surface Dirichlet rows detected from water cell occupancy
6.  velocity corrections from the pressure gradient
7.  N2P: advect particles, FLIP velocity update, PIC pressure replacement
8.  MUSL strain update: incremental deformation from the remapped
    displacement, volume, porosity and conductivity bookkeeping
9.  stabilization: nodal pressure smoothing, F-bar volumetric rescaling
    and (optionally) patch-averaged elastic tensors
10. constitutive stress update, exactly one evaluation per soil point

Pore pressure is tension positive throughout, matching the effective
stress convention.  Water separating from the soil skeleton degenerates
gracefully: nodes without soil support run at unit porosity with zero
drag, which is a plain incompressible fluid.  A run without any water
particles skips the pressure projection entirely and reduces to explicit
single-phase MPM.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .constitutive import initialize_norsand_site, material_update_arrays
from .errors import ConfigurationError, NumericalFailure, OutOfDomainError
from .grid import (
    BC_FIXED,
    BC_ROLLER_X,
    BC_ROLLER_Y,
    evaluate_bspline_many,
    evaluate_gimp_many,
)
from .stabilization import (
    PatchTiling,
    fbar_increment_many,
    nodewise_smooth,
    patch_average_Be,
)

__all__ = [
    "World",
    "NodalState",
    "PoissonSystem",
    "StepMetrics",
    "TimeStepControl",
    "TractionLoad",
    "GravityRamp",
    "p2n",
    "predict_water_velocity",
    "predict_soil_velocity",
    "detect_free_surface",
    "assemble_and_solve_pressure",
    "correct_velocities",
    "n2p",
    "update_point_state",
    "step",
    "compute_critical_dt",
    "settle_under_gravity",
]

_FORMULATIONS = ("double_point", "single_point")
_STABILIZATIONS = ("none", "fbar", "modified_fbar")
_CONDUCTIVITY_LAWS = ("kozeny_carman", "void_linear", "constant")


@dataclass(frozen=True)
class GravityRamp:
    """Linear body-force ramp; scale(t) saturates at one past ``t_end``."""

    t_end: float

    def scale(self, t):
        if self.t_end <= 0.0:
            return 1.0
        return min(t / self.t_end, 1.0)


@dataclass
class TractionLoad:
    """Surface load carried by Lagrangian boundary points.

    Each point holds a tributary length ``w`` so the nodal force is
    sum S_I(x_lp) * q(t) * w_lp.  The points ride the soil velocity
    field, which keeps the load glued to the deforming surface.
    """

    points: np.ndarray
    w: np.ndarray
    traction: np.ndarray
    t_ramp: float = 0.0

    @classmethod
    def along_segment(cls, p0, p1, spacing, traction, t_ramp=0.0):
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        length = float(np.linalg.norm(p1 - p0))
        if length <= 0.0 or spacing <= 0.0:
            raise ConfigurationError("traction segment needs positive length "
                                     "and spacing")
        count = max(int(round(length / spacing)), 1)
        s = (np.arange(count) + 0.5) / count
        pts = p0 + s[:, None] * (p1 - p0)
        return cls(points=pts, w=np.full(count, length / count),
                   traction=np.asarray(traction, dtype=float),
                   t_ramp=float(t_ramp))

    def value(self, t):
        if self.t_ramp <= 0.0:
            return self.traction
        return self.traction * min(t / self.t_ramp, 1.0)


@dataclass
class NodalState:
    """Start-of-step grid fields, gathered raw (no boundary conditions)."""

    M_s: np.ndarray
    v_s: np.ndarray
    n: np.ndarray
    k: np.ndarray
    M_w: np.ndarray
    v_w: np.ndarray
    active_s: np.ndarray
    active_w: np.ndarray


@dataclass
class PoissonSystem:
    """Result of the incompressibility projection."""

    dp: np.ndarray
    p_t: np.ndarray
    dirichlet: np.ndarray
    active: np.ndarray
    iterations: int
    residual: float
    L: object


@dataclass
class StepMetrics:
    step: int
    time: float
    cg_iterations: int
    cg_residual: float
    active_nodes: int
    dirichlet_nodes: int
    dp_max: float
    mass_soil: float
    mass_water: float


@dataclass(frozen=True)
class TimeStepControl:
    """Critical explicit step and the fraction actually run at."""

    dt_critical: float
    cfl_fraction: float = 0.92

    @property
    def dt(self):
        return self.cfl_fraction * self.dt_critical


@dataclass
class World:
    """Everything one simulation advances: grid, particles, model, clock.

    ``p_nodal`` is the persistent nodal pressure the projection increments
    live on; keeping it on the grid (rather than remapping it from the
    particles every step) pins free-surface rows exactly and avoids a
    self-amplifying sampling bias in the surface layer.
    """

    grid: object
    soil: object
    water: object
    model: object
    mix: object
    dt: float
    formulation: str = "double_point"
    stabilization: str = "modified_fbar"
    conductivity_law: str = "kozeny_carman"
    patch_factor: float = 1.5
    gimp_halfwidth: float = None
    loads: list = field(default_factory=list)
    gravity_ramp: GravityRamp = None
    plasticity_on: bool = True
    time: float = 0.0
    step_count: int = 0
    tiling: PatchTiling = None
    last_metrics: StepMetrics = None
    p_nodal: np.ndarray = None

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigurationError("time step must be positive")
        if self.p_nodal is None:
            self.p_nodal = np.zeros(self.grid.n_nodes)
        if self.formulation not in _FORMULATIONS:
            raise ConfigurationError(
                f"unknown formulation '{self.formulation}'")
        if self.stabilization not in _STABILIZATIONS:
            raise ConfigurationError(
                f"unknown stabilization mode '{self.stabilization}'")
        if self.conductivity_law not in _CONDUCTIVITY_LAWS:
            raise ConfigurationError(
                f"unknown conductivity law '{self.conductivity_law}'")
        if self.formulation == "single_point" and len(self.water) > 0:
            if (self.water.x.shape != self.soil.x.shape
                    or not np.allclose(self.water.x, self.soil.x)):
                raise ConfigurationError(
                    "single-point mode needs water points congruent with "
                    "the soil points")
            self.water.x[...] = self.soil.x

    @property
    def dry(self):
        return len(self.water) == 0

    def body_force(self):
        scale = 1.0 if self.gravity_ramp is None \
            else self.gravity_ramp.scale(self.time)
        return scale * np.asarray(self.mix.body_force, dtype=float)


def _shapes(world, x):
    if world.grid.mode == "bspline":
        return evaluate_bspline_many(world.grid, x)
    lp = world.gimp_halfwidth
    if lp is None:
        lp = world.grid.h / 4.0
    return evaluate_gimp_many(world.grid, x, np.array([lp, lp]))


def _scatter(ids, w, n_nodes):
    # bincount returns int64 for empty input even with float weights
    out = np.bincount(ids.ravel(), weights=w.ravel(), minlength=n_nodes)
    return out.astype(np.float64, copy=False)


def _scatter_vec(ids, w, vec, n_nodes):
    out = np.empty((n_nodes, 2))
    for d in range(2):
        out[:, d] = np.bincount(ids.ravel(),
                                weights=(w * vec[:, d, None]).ravel(),
                                minlength=n_nodes)
    return out


def _gather_vec(ids, S, nodal):
    return (S[:, :, None] * nodal[ids]).sum(axis=1)


def _apply_velocity_bc(grid, v):
    """Zero constrained components in place; exact by construction."""
    bc = grid.node_bc
    v[bc == BC_ROLLER_X, 0] = 0.0
    v[bc == BC_ROLLER_Y, 1] = 0.0
    v[bc == BC_FIXED] = 0.0
    return v


def _check_support(ids, nodal_mass, cutoff, label):
    if ids.shape[0] == 0:
        return
    ok = (nodal_mass[ids] > cutoff).any(axis=1)
    if not ok.all():
        bad = np.flatnonzero(~ok)
        raise NumericalFailure(
            f"{label} particles {bad[:10].tolist()} lost all nodal support "
            f"(every neighbour below the mass cutoff {cutoff:.3e})")


def p2n(world, shapes_s=None, shapes_w=None):
    """Gather particle state to the nodes (step 2).

    Porosity and conductivity are soil-mass-weighted maps; the nodal
    water mass is n_I * sum S rho_w V_w^t and the water velocity is
    weighted by the initial water volumes.  Nodes without soil support
    default to unit porosity (free water carries no drag there).
    """
    grid, soil, water = world.grid, world.soil, world.water
    nn = grid.n_nodes
    if shapes_s is None:
        shapes_s = _shapes(world, soil.x)
    ids_s, S_s, _ = shapes_s

    M_s = _scatter(ids_s, S_s * soil.m[:, None], nn)
    cut_s = 1e-12 * soil.m.mean() if len(soil) else 0.0
    active_s = M_s > cut_s if len(soil) else np.zeros(nn, dtype=bool)
    _check_support(ids_s, M_s, cut_s, "soil")
    v_s = _scatter_vec(ids_s, S_s * soil.m[:, None], soil.vel, nn)
    v_s[active_s] /= M_s[active_s, None]
    v_s[~active_s] = 0.0
    n = _scatter(ids_s, S_s * (soil.m * soil.n_por)[:, None], nn)
    k = _scatter(ids_s, S_s * (soil.m * soil.k_hyd)[:, None], nn)
    n[active_s] /= M_s[active_s]
    k[active_s] /= M_s[active_s]
    n[~active_s] = 1.0
    k[~active_s] = 1.0

    if world.dry:
        M_w = np.zeros(nn)
        v_w = np.zeros((nn, 2))
        active_w = np.zeros(nn, dtype=bool)
    else:
        if shapes_w is None:
            shapes_w = _shapes(world, water.x)
        ids_w, S_w, _ = shapes_w
        rho_w = world.mix.rho_w
        M_w = n * _scatter(ids_w, S_w * (rho_w * water.Vt)[:, None], nn)
        den = _scatter(ids_w, S_w * (rho_w * water.V0)[:, None], nn)
        cut_w = 1e-12 * water.m.mean()
        active_w = M_w > cut_w
        _check_support(ids_w, M_w, cut_w, "water")
        v_w = _scatter_vec(ids_w, S_w * (rho_w * water.V0)[:, None],
                           water.vel, nn)
        good = den > cut_w
        v_w[good] /= den[good, None]
        v_w[~good] = 0.0
    return NodalState(M_s=M_s, v_s=v_s, n=n, k=k, M_w=M_w, v_w=v_w,
                      active_s=active_s, active_w=active_w)


def predict_water_velocity(world, nodal, shapes_w):
    """Water momentum predictor with implicit drag (step 3).

    The Darcy term Q = g n M_w / k is treated implicitly through the
    augmented mass M_w + Q dt, so arbitrarily low conductivities stay
    stable; Q is zero where the soil has no support.
    """
    grid, water = world.grid, world.water
    nn = grid.n_nodes
    if world.dry:
        return np.zeros((nn, 2))
    ids_w, S_w, G_w = shapes_w
    b = world.body_force()

    f_int = np.empty((nn, 2))
    pv = water.p * water.Vt
    for d in range(2):
        f_int[:, d] = np.bincount(ids_w.ravel(),
                                  weights=(G_w[:, :, d] * pv[:, None]).ravel(),
                                  minlength=nn)
    f_int *= nodal.n[:, None]
    f_ext = _scatter(ids_w, S_w * water.m[:, None], nn)[:, None] * b

    Q = np.zeros(nn)
    act = nodal.active_s
    Q[act] = world.mix.g_const * nodal.n[act] * nodal.M_w[act] / nodal.k[act]
    M_bar = nodal.M_w + Q * world.dt

    v_star = np.zeros((nn, 2))
    good = M_bar > 1e-12 * water.m.mean()
    rhs = world.dt * (f_ext - f_int + Q[:, None] * nodal.v_s) \
        + nodal.M_w[:, None] * nodal.v_w
    v_star[good] = rhs[good] / M_bar[good, None]
    return _apply_velocity_bc(grid, v_star)


def predict_soil_velocity(world, nodal, shapes_s, shapes_w, v_w_star):
    """Soil momentum predictor (step 4).

    Internal forces take the effective stress on soil points plus the
    smoothed pore pressure on water points; the water phase feeds back
    through its predicted momentum increment.
    """
    grid, soil, water = world.grid, world.soil, world.water
    nn = grid.n_nodes
    ids_s, S_s, G_s = shapes_s
    b = world.body_force()

    f_int = np.empty((nn, 2))
    sig_v = soil.sigma_eff[:, :2, :2] * soil.Vt[:, None, None]
    contrib = np.einsum("pdk,pik->pid", sig_v, G_s)
    for d in range(2):
        f_int[:, d] = np.bincount(ids_s.ravel(),
                                  weights=contrib[:, :, d].ravel(),
                                  minlength=nn)
    f_ext = _scatter(ids_s, S_s * soil.m[:, None], nn)[:, None] * b

    if not world.dry:
        ids_w, S_w, G_w = shapes_w
        pv = water.p * water.Vt
        for d in range(2):
            f_int[:, d] += np.bincount(
                ids_w.ravel(), weights=(G_w[:, :, d] * pv[:, None]).ravel(),
                minlength=nn)
        f_ext += _scatter(ids_w, S_w * water.m[:, None], nn)[:, None] * b

    for load in world.loads:
        lids, lS, _ = _shapes(world, load.points)
        q = load.value(world.time)
        for d in range(2):
            f_ext[:, d] += np.bincount(
                lids.ravel(), weights=(lS * (load.w * q[d])[:, None]).ravel(),
                minlength=nn)

    v_star = np.zeros((nn, 2))
    act = nodal.active_s
    dv_w = nodal.M_w[:, None] * (v_w_star - nodal.v_w)
    v_star[act] = nodal.v_s[act] + (
        world.dt * (f_ext[act] - f_int[act]) - dv_w[act]
    ) / nodal.M_s[act, None]
    return _apply_velocity_bc(grid, v_star)


def detect_free_surface(world, water_x=None):
    """Flag pressure Dirichlet nodes from water cell occupancy (step 5b).

    A node is a surface node when any grid cell whose closed span
    contains it holds no water particle.  Ghost cells past a free wall
    count as empty (atmosphere), past a constrained wall as full
    (sealed).  Prescribed entries in ``grid.pressure_bc`` are merged in.
    Returns ``(mask, target)`` with target pressures per node.
    """
    grid = world.grid
    ncx, ncy = grid.cells
    if water_x is None:
        water_x = world.water.x

    occ = np.zeros((ncx + 2, ncy + 2), dtype=bool)
    if water_x.shape[0]:
        rel = (water_x - grid.origin) / grid.h
        cx = np.clip(np.floor(rel[:, 0]).astype(int), 0, ncx - 1)
        cy = np.clip(np.floor(rel[:, 1]).astype(int), 0, ncy - 1)
        occ[1:-1, 1:-1].flat = np.bincount(
            cx * ncy + cy, minlength=ncx * ncy).astype(bool)

    kinds = grid.edge_kinds or {}
    sealed_l = kinds.get("left", "free") != "free"
    sealed_r = kinds.get("right", "free") != "free"
    sealed_b = kinds.get("bottom", "free") != "free"
    sealed_t = kinds.get("top", "free") != "free"
    occ[0, 1:-1] = sealed_l
    occ[-1, 1:-1] = sealed_r
    occ[1:-1, 0] = sealed_b
    occ[1:-1, -1] = sealed_t
    occ[0, 0] = sealed_l and sealed_b
    occ[0, -1] = sealed_l and sealed_t
    occ[-1, 0] = sealed_r and sealed_b
    occ[-1, -1] = sealed_r and sealed_t

    # incident cells per axis: both neighbours when the node coordinate
    # sits on a cell boundary, the containing cell otherwise
    tol = 1e-9
    mask = np.zeros(grid.n_nodes, dtype=bool)
    rel = (grid.node_positions - grid.origin) / grid.h
    rx = rel[:, 0]
    ry = rel[:, 1]
    cx_lo = np.floor(rx - tol).astype(int)
    cx_hi = np.floor(rx + tol).astype(int)
    cy_lo = np.floor(ry - tol).astype(int)
    cy_hi = np.floor(ry + tol).astype(int)
    for cx in (cx_lo, cx_hi):
        cxi = np.clip(cx, -1, ncx) + 1
        for cy in (cy_lo, cy_hi):
            cyi = np.clip(cy, -1, ncy) + 1
            mask |= ~occ[cxi, cyi]

    target = np.zeros(grid.n_nodes)
    prescribed = ~np.isnan(grid.pressure_bc)
    target[prescribed] = grid.pressure_bc[prescribed]
    mask |= prescribed
    return mask, target


def _pcg_jacobi(A, b, rtol=1e-10, maxiter=None):
    """Deterministic preconditioned conjugate gradients.

    Raises ``NumericalFailure`` when the relative residual does not reach
    ``rtol`` within ``maxiter`` (default 10 n) iterations.
    """
    n = b.shape[0]
    if n == 0:
        return np.zeros(0), 0, 0.0
    if maxiter is None:
        maxiter = 10 * n
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    x = np.zeros(n)
    r = b.copy()
    Minv = 1.0 / A.diagonal()
    z = Minv * r
    p = z.copy()
    rz = float(r @ z)
    res = bnorm
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r))
        if res <= rtol * bnorm:
            return x, it, res / bnorm
        z = Minv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NumericalFailure(
        f"pressure solve stalled: {maxiter} CG iterations left a relative "
        f"residual of {res / bnorm:.3e}")


def assemble_and_solve_pressure(world, nodal, v_s_star, v_w_star,
                                shapes_s, shapes_w):
    """Incompressibility projection dt L dp = D_s v*_s + D_w v*_w (step 5).

    The Laplacian carries the phase porosities at particle level,
    L_IJ = sum (1-n)/rho_s V grad S_I . grad S_J over soil points plus
    the n/rho_w counterpart over water points, which keeps it exactly
    symmetric.  Free-surface and prescribed-pressure rows are eliminated
    symmetrically and the reduced system is solved with Jacobi-PCG.
    """
    grid, soil, water = world.grid, world.soil, world.water
    nn = grid.n_nodes
    ids_s, S_s, G_s = shapes_s
    ids_w, S_w, G_w = shapes_w

    w_s = (1.0 - soil.n_por) / world.mix.rho_s * soil.Vt
    w_w = water.n_w / world.mix.rho_w * water.Vt

    def blocks(ids, G, w):
        k = ids.shape[1]
        vals = np.einsum("pid,pjd->pij", G, G) * w[:, None, None]
        rows = np.repeat(ids, k, axis=1)
        cols = np.tile(ids, (1, k))
        return rows.ravel(), cols.ravel(), vals.ravel()

    r1, c1, v1 = blocks(ids_s, G_s, w_s)
    r2, c2, v2 = blocks(ids_w, G_w, w_w)
    L = sparse.coo_matrix(
        (np.concatenate([v1, v2]),
         (np.concatenate([r1, r2]), np.concatenate([c1, c2]))),
        shape=(nn, nn)).tocsr()

    div_s = np.einsum("pid,pid->p", G_s, v_s_star[ids_s])
    div_w = np.einsum("pid,pid->p", G_w, v_w_star[ids_w])
    rhs = _scatter(ids_s, S_s * ((1.0 - soil.n_por) * soil.Vt * div_s)[:, None],
                   nn)
    rhs += _scatter(ids_w, S_w * (water.n_w * water.Vt * div_w)[:, None], nn)

    # the increments live on the persistent nodal field, so the Dirichlet
    # rows are target - p_t with p_t the grid's own stored pressure
    p_t = world.p_nodal
    dirichlet, target = detect_free_surface(world)
    diag = L.diagonal()
    active = diag > 1e-14 * diag.max() if diag.max() > 0.0 \
        else np.zeros(nn, dtype=bool)

    dp = np.zeros(nn)
    dp[dirichlet] = target[dirichlet] - p_t[dirichlet]
    free = active & ~dirichlet
    f_idx = np.flatnonzero(free)
    d_idx = np.flatnonzero(dirichlet)
    b = rhs / world.dt
    b_f = b[f_idx]
    if d_idx.size and f_idx.size:
        b_f = b_f - L[f_idx][:, d_idx] @ dp[d_idx]
    A_ff = L[f_idx][:, f_idx]
    x, iters, res = _pcg_jacobi(A_ff, b_f)
    dp[f_idx] = x
    return PoissonSystem(dp=dp, p_t=p_t, dirichlet=dirichlet, active=active,
                         iterations=iters, residual=res, L=L)


def correct_velocities(world, nodal, v_s_star, v_w_star, dp,
                       shapes_s, shapes_w):
    """Project the predictors onto the divergence-consistent field (step 6).

    The water correction uses the water-phase gradient operator alone;
    the soil correction carries the full mixture gradient minus the water
    momentum increment, which algebraically reduces to the soil-phase
    gradient.  Boundary conditions are applied after both corrections.
    """
    grid, soil, water = world.grid, world.soil, world.water
    nn = grid.n_nodes
    ids_s, S_s, G_s = shapes_s
    ids_w, S_w, G_w = shapes_w

    def grad_at(ids, G, vec):
        return (G * vec[ids][:, :, None]).sum(axis=1)

    def gradient_op(ids, S, w, gp):
        out = np.empty((nn, 2))
        for d in range(2):
            out[:, d] = np.bincount(ids.ravel(),
                                    weights=(S * (w * gp[:, d])[:, None]).ravel(),
                                    minlength=nn)
        return out

    gp_w = grad_at(ids_w, G_w, dp)
    Gw = gradient_op(ids_w, S_w, water.n_w * water.Vt, gp_w)
    v_w_new = v_w_star.copy()
    act_w = nodal.active_w
    v_w_new[act_w] += world.dt * Gw[act_w] / nodal.M_w[act_w, None]

    gp_s = grad_at(ids_s, G_s, dp)
    Gs = gradient_op(ids_s, S_s, (1.0 - soil.n_por) * soil.Vt, gp_s)
    v_s_new = v_s_star.copy()
    act_s = nodal.active_s
    dv_w = nodal.M_w[:, None] * (v_w_new - v_w_star)
    v_s_new[act_s] += (world.dt * (Gs + Gw)[act_s] - dv_w[act_s]) \
        / nodal.M_s[act_s, None]

    _apply_velocity_bc(grid, v_w_new)
    _apply_velocity_bc(grid, v_s_new)
    return v_s_new, v_w_new


def n2p(world, nodal, v_s_new, v_w_new, p_new, shapes_s, shapes_w):
    """Grid-to-particle transfer (step 7).

    Positions move with the corrected nodal field (PIC), velocities get
    the FLIP increment against the raw start-of-step map, and the pore
    pressure is fully replaced by the nodal solution.  In single-point
    mode the water points ride the soil kinematics instead.
    """
    grid, soil, water = world.grid, world.soil, world.water
    ids_s, S_s, _ = shapes_s
    dt = world.dt

    soil.x += dt * _gather_vec(ids_s, S_s, v_s_new)
    soil.vel += _gather_vec(ids_s, S_s, v_s_new - nodal.v_s)
    inside = grid.contains(soil.x)
    if not inside.all():
        bad = int(np.flatnonzero(~inside)[0])
        raise OutOfDomainError(
            f"soil particle {bad} left the domain at {soil.x[bad]}")

    if world.dry:
        return
    ids_w, S_w, _ = shapes_w
    if world.formulation == "single_point":
        water.x[...] = soil.x
        water.vel[...] = _gather_vec(ids_s, S_s, v_s_new)
    else:
        water.x += dt * _gather_vec(ids_w, S_w, v_w_new)
        water.vel += _gather_vec(ids_w, S_w, v_w_new - nodal.v_w)
        inside = grid.contains(water.x)
        if not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            raise OutOfDomainError(
                f"water particle {bad} left the domain at {water.x[bad]}")
    water.p[...] = (S_w * p_new[ids_w]).sum(axis=1)

    for load in world.loads:
        lids, lS, _ = _shapes(world, load.points)
        load.points += dt * _gather_vec(lids, lS, v_s_new)


def update_point_state(world, nodal, shapes_s, shapes_w):
    """MUSL deformation update plus stabilization and stress (steps 8-10).

    The incremental deformation gradient comes from the remapped nodal
    displacement increment (with boundary conditions re-applied), volumes
    advance with the raw increment, porosity follows the volume ratio and
    is projected onto the water points through the grid.  The chosen
    stabilization mode then rescales the increment (F-bar) and optionally
    patch-averages the elastic tensors before the single constitutive
    evaluation per point.
    """
    grid, soil, water = world.grid, world.soil, world.water
    nn = grid.n_nodes
    ids_s, S_s, G_s = shapes_s
    dt = world.dt
    npart = len(soil)
    if npart == 0:
        return

    du = _scatter_vec(ids_s, S_s * soil.m[:, None], soil.vel, nn)
    act = nodal.active_s
    du[act] *= dt / nodal.M_s[act, None]
    du[~act] = 0.0
    _apply_velocity_bc(grid, du)

    dF = np.zeros((npart, 3, 3))
    dF[:, 2, 2] = 1.0
    dF[:, :2, :2] = np.eye(2) \
        + np.einsum("pid,pik->pdk", du[ids_s], G_s)
    dJ = dF[:, 0, 0] * dF[:, 1, 1] - dF[:, 0, 1] * dF[:, 1, 0]
    if np.any(dJ <= 0.0):
        bad = np.flatnonzero(dJ <= 0.0)
        raise NumericalFailure(
            f"inverted increment at soil particles {bad[:10].tolist()}")

    soil.Vt[...] = dJ * soil.Vt
    J = soil.J
    n_new = 1.0 - (1.0 - soil.n0) / J
    if np.any(n_new <= 0.0) or np.any(n_new >= 1.0):
        bad = np.flatnonzero((n_new <= 0.0) | (n_new >= 1.0))
        raise NumericalFailure(
            "porosity left (0, 1) at soil particles "
            f"{bad[:10].tolist()}: n={n_new[bad[:10]].tolist()}")
    soil.n_por[...] = n_new

    if world.conductivity_law == "kozeny_carman":
        soil.k_hyd[...] = soil.k_C1 * n_new ** 3 / (1.0 - n_new) ** 2
    elif world.conductivity_law == "void_linear":
        k0 = soil.k_C1 * soil.n0 ** 3 / (1.0 - soil.n0) ** 2
        soil.k_hyd[...] = k0 * J

    if not world.dry:
        ids_w, S_w, _ = shapes_w
        mn = _scatter(ids_s, S_s * (soil.m * n_new)[:, None], nn)
        n_nodal = np.ones(nn)
        n_nodal[act] = mn[act] / nodal.M_s[act]
        n_wp = (S_w * n_nodal[ids_w]).sum(axis=1)
        if np.any(n_wp <= 0.0) or np.any(n_wp > 1.0 + 1e-12):
            bad = np.flatnonzero((n_wp <= 0.0) | (n_wp > 1.0 + 1e-12))
            raise NumericalFailure(
                "projected porosity left (0, 1] at water particles "
                f"{bad[:10].tolist()}: n={n_wp[bad[:10]].tolist()}")
        water.n_w[...] = np.minimum(n_wp, 1.0)
        water.Vt[...] = (water.n0 / water.n_w) * water.V0
        # node-wise pressure smoothing; the smoothed value is what enters
        # the next step's internal forces
        water.p[...] = nodewise_smooth(water.p, water.m, ids_w, S_w, nn)

    mode = world.stabilization
    if mode == "none":
        dF_bar = dF
        J_bar = J
    else:
        dJ_bar = nodewise_smooth(dJ, soil.m, ids_s, S_s, nn)
        J_bar = nodewise_smooth(J, soil.m, ids_s, S_s, nn)
        dF_bar = fbar_increment_many(dF, dJ, dJ_bar)
        if mode == "modified_fbar":
            if world.tiling is None:
                world.tiling = PatchTiling.from_grid(grid,
                                                     world.patch_factor)
            soil.B_e[...] = patch_average_Be(soil, world.tiling)

    tau = material_update_arrays(world.model, soil, dF_bar, J_bar=J_bar,
                                 plasticity_on=world.plasticity_on)
    soil.sigma_eff[...] = tau / J[:, None, None]


def step(world):
    """Advance the world by one time step; returns the step metrics.

    Numerical breakdowns (inverted elements, lost support, stalled
    pressure solves, constitutive failures) surface as
    ``NumericalFailure`` with the step and time attached.
    """
    try:
        metrics = _step_inner(world)
    except OutOfDomainError as exc:
        raise OutOfDomainError(
            f"step {world.step_count} (t={world.time:.6g} s): {exc}") \
            from exc
    except NumericalFailure as exc:
        raise NumericalFailure(
            f"step {world.step_count} (t={world.time:.6g} s): {exc}") \
            from exc
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        raise NumericalFailure(
            f"step {world.step_count} (t={world.time:.6g} s): {exc}") \
            from exc
    world.time += world.dt
    world.step_count += 1
    world.last_metrics = metrics
    return metrics


def _step_inner(world):
    soil, water = world.soil, world.water
    shapes_s = _shapes(world, soil.x)
    if world.dry:
        shapes_w = None
    elif world.formulation == "single_point":
        shapes_w = shapes_s
    else:
        shapes_w = _shapes(world, water.x)

    nodal = p2n(world, shapes_s, shapes_w)
    if world.dry:
        v_w_star = np.zeros((world.grid.n_nodes, 2))
        v_s_star = predict_soil_velocity(world, nodal, shapes_s, None,
                                         v_w_star)
        v_s_new, v_w_new = v_s_star, v_w_star
        sys = None
        p_new = None
    else:
        v_w_star = predict_water_velocity(world, nodal, shapes_w)
        v_s_star = predict_soil_velocity(world, nodal, shapes_s, shapes_w,
                                         v_w_star)
        sys = assemble_and_solve_pressure(world, nodal, v_s_star, v_w_star,
                                          shapes_s, shapes_w)
        v_s_new, v_w_new = correct_velocities(world, nodal, v_s_star,
                                              v_w_star, sys.dp,
                                              shapes_s, shapes_w)
        p_new = sys.p_t + sys.dp
        world.p_nodal = p_new
    n2p(world, nodal, v_s_new, v_w_new, p_new, shapes_s, shapes_w)
    update_point_state(world, nodal, shapes_s, shapes_w)

    return StepMetrics(
        step=world.step_count, time=world.time,
        cg_iterations=0 if sys is None else sys.iterations,
        cg_residual=0.0 if sys is None else sys.residual,
        active_nodes=int(nodal.active_s.sum()) if sys is None
        else int(sys.active.sum()),
        dirichlet_nodes=0 if sys is None else int(sys.dirichlet.sum()),
        dp_max=0.0 if sys is None else float(np.abs(sys.dp).max(initial=0.0)),
        mass_soil=soil.total_mass(),
        mass_water=water.total_mass() if len(water) else 0.0)


def compute_critical_dt(model, mix, n0, h):
    """Explicit stability estimate dt_crit = h / c for the mixture.

    The elastic wave speed uses c = sqrt(E_eff / rho_mix) with the
    mixture density (1-n0) rho_s + n0 rho_w.  For the critical-state
    model the stiffness scale is taken as 2.6 G (a Poisson ratio of 0.3
    on the constant shear modulus); pressure-dependent bulk stiffness
    makes any single number approximate, so flow scenarios should pin
    their step explicitly.
    """
    if not (0.0 < n0 < 1.0):
        raise ConfigurationError("porosity must lie in (0, 1)")
    rho_mix = (1.0 - n0) * mix.rho_s + n0 * mix.rho_w
    if model.name == "norsand":
        E_eff = 2.6 * model.params.G_shear
    else:
        E_eff = model.params.E
    c = math.sqrt(E_eff / rho_mix)
    return TimeStepControl(dt_critical=h / c)


def settle_under_gravity(world, t_ramp, k_override=1.0):
    """Elastic gravity-ramp initialization (critical-state scenarios).

    Runs the ramp with plasticity disabled, a high constant conductivity
    and the water riding the soil kinematics, so the skeleton settles
    into a hyperelastic geostatic state without drainage lag.  For
    Nor-Sand the reference pressures, image pressures and specific
    volumes are frozen from the settled state afterwards.  Restores the
    coupling mode, conductivity law and plasticity flag before returning.
    """
    if t_ramp <= 0.0:
        raise ConfigurationError("gravity ramp needs a positive duration")
    saved = (world.formulation, world.conductivity_law, world.plasticity_on)
    if not world.dry:
        world.formulation = "single_point"
        world.water.x[...] = world.soil.x
    world.conductivity_law = "constant"
    k_saved = world.soil.k_hyd.copy()
    world.soil.k_hyd[...] = k_override
    world.plasticity_on = False
    world.gravity_ramp = GravityRamp(t_end=t_ramp)
    if world.model.name == "norsand":
        world.soil.p0[...] = -2000.0
        world.soil.eps_e_v0[...] = 0.0

    n_steps = int(round(t_ramp / world.dt))
    for _ in range(n_steps):
        step(world)

    if world.model.name == "norsand":
        initialize_norsand_site(world.soil, GravityRamp(t_end=t_ramp),
                                world.model.params)
    world.formulation, world.conductivity_law, world.plasticity_on = saved
    if world.conductivity_law == "kozeny_carman":
        n = world.soil.n_por
        world.soil.k_hyd[...] = world.soil.k_C1 * n ** 3 / (1.0 - n) ** 2
    elif world.conductivity_law == "void_linear":
        k0 = world.soil.k_C1 * world.soil.n0 ** 3 \
            / (1.0 - world.soil.n0) ** 2
        world.soil.k_hyd[...] = k0 * world.soil.J
    else:
        world.soil.k_hyd[...] = k_saved
    return world
