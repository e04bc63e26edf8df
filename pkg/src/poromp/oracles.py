"""Closed-form consolidation solutions and brute-force constitutive integrators.

Everything in this module is deliberately independent of the MPM machinery.
The series functions evaluate the classical Terzaghi column and the
finite-strain column of Xie & Leo (2004); the single-element drivers push a
constitutive model through prescribed triaxial deformation paths; the
sub-stepped integrator re-integrates the same rate equations with a
forward-Euler cutting-plane scheme.  Simulation output is judged against
these references, never the other way around.

Sign conventions: the series functions return pore-pressure magnitudes
(positive in compression) because that is how consolidation results are
tabulated; the continuum modules store tension-positive stresses, so the
comparison layer flips signs.  Depth ``z`` is measured downward from the
drainage surface, ``z = H`` being the impermeable base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .constants import GRAVITY, RHO_WATER

__all__ = [
    "ConsolidationParams",
    "terzaghi_pressure",
    "xie_settlement",
    "xie_pressure",
    "DriverRecord",
    "undrained_driver",
    "drained_driver",
    "explicit_substep_integrator",
]


@dataclass(frozen=True)
class ConsolidationParams:
    """Parameter block shared by the Terzaghi and Xie column solutions.

    Attributes
    ----------
    H : float
        Drainage height [m] (the full column height for one-way drainage).
    q : float
        Surface load magnitude [Pa].
    m_v : float
        Constrained compliance, the inverse of the constrained modulus
        ``(1+nu)(1-2nu)/((1-nu) E)`` [1/Pa].
    k : float
        Hydraulic conductivity [m/s].
    series_terms : int
        Truncation length for the Fourier series, at least 100.
    """

    H: float
    q: float
    m_v: float
    k: float
    series_terms: int = 200

    def __post_init__(self):
        if min(self.H, self.q, self.m_v, self.k) <= 0.0:
            raise ValueError("all consolidation parameters must be positive")
        if self.series_terms < 100:
            raise ValueError("series_terms must be at least 100")

    @classmethod
    def from_elastic(cls, H, q, E, nu, k, series_terms=200):
        """Build the block from drained elastic constants E and nu."""
        m_v = (1.0 + nu) * (1.0 - 2.0 * nu) / ((1.0 - nu) * E)
        return cls(H=H, q=q, m_v=m_v, k=k, series_terms=series_terms)

    @property
    def c_v(self):
        """Consolidation coefficient k/(rho_w g m_v) [m^2/s]."""
        return self.k / (RHO_WATER * GRAVITY * self.m_v)

    @property
    def final_settlement(self):
        """Ultimate finite-strain settlement H(1 - exp(-m_v q)) [m]."""
        return self.H * -math.expm1(-self.m_v * self.q)

    def time_factor(self, t):
        """Dimensionless time Tv = c_v t / H^2."""
        return self.c_v * np.asarray(t, dtype=float) / self.H**2


def _series_modes(terms):
    # M_m = (m + 1/2) pi, m = 0, 1, ...; identical to (m - 1/2) pi from m = 1.
    return (np.arange(terms, dtype=float) + 0.5) * np.pi


def terzaghi_pressure(Tv, z_over_H, terms=200):
    """Normalized excess pore pressure p/q of the classical Terzaghi column.

    Parameters broadcast like numpy ufuncs; scalars in, scalar out.

    Parameters
    ----------
    Tv : array_like
        Dimensionless time factor, non-negative.
    z_over_H : array_like
        Relative depth in [0, 1], zero at the drainage surface.
    terms : int
        Series truncation length.
    """
    Tv = np.asarray(Tv, dtype=float)
    zeta = np.asarray(z_over_H, dtype=float)
    if np.any(Tv < 0.0):
        raise ValueError("time factor Tv must be non-negative")
    if np.any((zeta < 0.0) | (zeta > 1.0)):
        raise ValueError("z/H must lie in [0, 1]")
    M = _series_modes(terms)
    shape = np.broadcast_shapes(Tv.shape, zeta.shape)
    Tv_b = np.broadcast_to(Tv, shape)[..., None]
    zeta_b = np.broadcast_to(zeta, shape)[..., None]
    # exp argument is capped below ~0 so overflow cannot occur
    series = (2.0 / M) * np.sin(M * zeta_b) * np.exp(-(M**2) * Tv_b)
    out = series.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def xie_settlement(Tv, params: ConsolidationParams):
    """Top-surface settlement of the finite-strain consolidation column.

    Returns
    -------
    (S_t, U_s)
        Settlement [m] and degree of consolidation S_t / S_inf.
    """
    Tv = np.asarray(Tv, dtype=float)
    if np.any(Tv < 0.0):
        raise ValueError("time factor Tv must be non-negative")
    M = _series_modes(params.series_terms)
    remaining = ((2.0 / M**2) * np.exp(-(M**2) * Tv[..., None])).sum(axis=-1)
    # the truncated series leaves O(1/terms) behind at Tv=0 where the true
    # sum is exactly one; pin the analytic limit there
    U_s = np.where(Tv == 0.0, 0.0, 1.0 - remaining)
    S_t = params.final_settlement * U_s
    if S_t.ndim == 0:
        return float(S_t), float(U_s)
    return S_t, U_s


def xie_pressure(Tv, z, params: ConsolidationParams):
    """Excess pore pressure [Pa] of the finite-strain consolidation column.

    The solution wraps the Terzaghi-type series in a logarithm,
    ``p = ln(1 + (e^{m_v q} - 1) * series) / m_v``.  A severely truncated
    series at a tiny time factor can push the logarithm argument below zero;
    in that case the truncation length is doubled automatically.
    """
    Tv = np.asarray(Tv, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(Tv < 0.0):
        raise ValueError("time factor Tv must be non-negative")
    if np.any((z < 0.0) | (z > params.H)):
        raise ValueError("depth z must lie in [0, H]")
    amp = math.expm1(params.m_v * params.q)
    shape = np.broadcast_shapes(Tv.shape, z.shape)
    Tv_b = np.broadcast_to(Tv, shape)[..., None]
    zeta_b = (np.broadcast_to(z, shape) / params.H)[..., None]
    terms = params.series_terms
    while True:
        M = _series_modes(terms)
        series = ((2.0 / M) * np.sin(M * zeta_b) * np.exp(-(M**2) * Tv_b)).sum(axis=-1)
        arg = 1.0 + amp * series
        if np.all(arg > 0.0):
            break
        if terms >= 2**21:
            raise FloatingPointError("xie_pressure series failed to stay positive")
        terms *= 2
    out = np.log(arg) / params.m_v
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Single-element triaxial drivers
# ---------------------------------------------------------------------------


@dataclass
class DriverRecord:
    """Stress/strain history of a single-element driver run.

    Mean stress and deviator are reported from the Kirchhoff stress the
    model returns.  ``p`` follows the triaxial-plot convention, positive
    in compression, so a compression path traces dq = 3 dp with both
    increments positive; ``eps_a`` is the accumulated logarithmic axial
    strain (negative in compression).
    """

    eps_a: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    J: np.ndarray
    tau: np.ndarray
    states: list = field(repr=False, default_factory=list)

    @property
    def final_state(self):
        return self.states[-1]


def _pq(tau):
    mean = np.trace(tau) / 3.0
    dev = tau - mean * np.eye(3)
    # compression-positive mean stress, the convention of triaxial plots
    return -mean, math.sqrt(1.5 * float(np.tensordot(dev, dev)))


def _record_from_path(model, state, dF_of_step, steps):
    from . import constitutive as con

    eps_a = np.zeros(steps + 1)
    p = np.zeros(steps + 1)
    q = np.zeros(steps + 1)
    v = np.zeros(steps + 1)
    J = np.ones(steps + 1)
    tau_hist = np.zeros((steps + 1, 3, 3))
    states = [state]
    tau = con.material_stress(model, state)
    p[0], q[0] = _pq(tau)
    tau_hist[0] = tau
    v[0] = getattr(state, "v", np.nan)
    for n in range(1, steps + 1):
        dF = dF_of_step(states[-1])
        Jn = J[n - 1] * float(np.linalg.det(dF))
        tau, state_new = con.material_update(model, states[-1], dF, J_bar=Jn)
        eps_a[n] = eps_a[n - 1] + math.log(dF[0, 0])
        p[n], q[n] = _pq(tau)
        v[n] = getattr(state_new, "v", np.nan)
        J[n] = Jn
        tau_hist[n] = tau
        states.append(state_new)
    return DriverRecord(eps_a=eps_a, p=p, q=q, v=v, J=J, tau=tau_hist, states=states)


def undrained_driver(model, state, deps_a, steps):
    """Drive a constitutive model along an isochoric triaxial path.

    Each step applies ``dF = diag(1+deps_a, s, s)`` with
    ``s = (1+deps_a)^{-1/2}``, so det(dF) = 1 exactly and the Jacobian stays
    at one for the whole path.  Compression is ``deps_a < 0``.

    Parameters
    ----------
    model : constitutive.MaterialModel
        Model name plus parameter block.
    state : constitutive.ConstitutiveState
        Starting state, usually from an isotropic consolidation helper.
    deps_a : float
        Axial strain increment per step, > -1.
    steps : int
        Number of increments.
    """
    if deps_a <= -1.0:
        raise ValueError("axial increment must keep the stretch positive")
    a = 1.0 + deps_a
    lat = 1.0 / math.sqrt(a)
    # search the ulp neighborhood of the two lateral stretches for the pair
    # whose floating-point determinant is closest to 1; a fixed rounding
    # bias would otherwise accumulate linearly over long runs
    candidates = [math.nextafter(lat, math.inf), lat, math.nextafter(lat, 0.0)]
    # rank by determinant error first, then prefer symmetric lateral pairs
    # so no spurious deviator enters the path
    dF = min(
        (np.diag([a, l1, l2]) for l1 in candidates for l2 in candidates),
        key=lambda m: (abs(float(np.linalg.det(m)) - 1.0),
                       abs(m[1, 1] - m[2, 2]), abs(m[1, 1] - lat)))
    return _record_from_path(model, state, lambda s: dF, steps)


def drained_driver(model, state, deps_a, steps, fd_eps=1e-8):
    """Drive a constitutive model along a constant-lateral-stress path.

    The lateral stretch exponents come from the current elastoplastic
    tangent, obtained by finite-differencing the stress update:
    ``dF = diag(1+deps_a, r^{C21/(C22+C23)}, r^{C31/(C32+C33)})`` with
    ``r = 1/(1+deps_a)``.  Along the resulting path the stress obeys the
    drained triaxial condition dq = 3 dp.
    """
    from . import constitutive as con

    if deps_a <= -1.0:
        raise ValueError("axial increment must keep the stretch positive")
    # probe the tangent on the loading branch: axial along the driven
    # direction, lateral opposite (drained shearing extends the sides)
    sgn = 1.0 if deps_a > 0.0 else -1.0
    signs = (sgn, -sgn, -sgn)
    r = 1.0 / (1.0 + deps_a)
    exponents = [0.0, 0.0]

    def dF_of_step(s):
        # the exponents feed back into the branch the tangent is probed on,
        # so iterate the pair to self-consistency within the step; the
        # tangent is evaluated about the half increment, where a single
        # linearization represents the whole step to second order (hardening
        # models shift their tangent noticeably across even a small step)
        for _ in range(3):
            dF_half = np.diag([(1.0 + deps_a) ** 0.5,
                               r ** (0.5 * exponents[0]),
                               r ** (0.5 * exponents[1])])
            C = con.material_tangent(model, s, eps=fd_eps, signs=signs,
                                     base_dF=dF_half)
            d22 = C[1, 1] + C[1, 2]
            d33 = C[2, 1] + C[2, 2]
            scale = max(abs(C[0, 0]), abs(C[1, 1]), abs(C[2, 2]))
            if min(abs(d22), abs(d33)) < 1e-9 * scale or scale == 0.0:
                raise ArithmeticError("singular tangent in drained driver")
            exponents[0] = C[1, 0] / d22
            exponents[1] = C[2, 0] / d33
        return np.diag([1.0 + deps_a, r ** exponents[0], r ** exponents[1]])

    return _record_from_path(model, state, dF_of_step, steps)


def explicit_substep_integrator(model, state, dF, substeps=1000):
    """Integrate one deformation increment with forward-Euler sub-steps.

    The increment ``dF`` is split into ``substeps`` equal sub-increments
    (exact matrix root for the diagonal stretches the drivers produce) and
    each sub-increment is corrected back to the yield surface with an
    explicit cutting-plane loop.  The rate equations are written out here
    on purpose, independently of the implicit return mappings they verify.

    Returns ``(tau, state_new)``.
    """
    if substeps < 100:
        raise ValueError("substeps must be at least 100")
    dF = np.asarray(dF, dtype=float)
    if np.allclose(dF, np.diag(np.diagonal(dF))):
        root = np.diag(np.diagonal(dF) ** (1.0 / substeps))
    else:
        from scipy.linalg import expm, logm

        root = np.real_if_close(expm(logm(dF) / substeps))
    name = model.name
    if name == "elastic":
        return _explicit_elastic(model.params, state, root, substeps)
    if name == "mohr_coulomb":
        return _explicit_mohr_coulomb(model.params, state, root, substeps)
    if name == "norsand":
        return _explicit_norsand(model.params, state, root, substeps)
    raise ValueError(f"unknown material model {name!r}")


def _eig_desc(B):
    lam, P = np.linalg.eigh(B)
    return lam[::-1].copy(), P[:, ::-1].copy()


def _lame(E, nu):
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = 0.5 * E / (1.0 + nu)
    return lam, mu


def _explicit_elastic(params, state, root, substeps):
    from dataclasses import replace

    lam_l, mu = _lame(params.E, params.nu)
    B = np.asarray(state.B_e, dtype=float)
    for _ in range(substeps):
        B = root @ B @ root.T
    lam, P = _eig_desc(B)
    eps = 0.5 * np.log(lam)
    tau_pr = lam_l * eps.sum() + 2.0 * mu * eps
    tau = (P * tau_pr) @ P.T
    return tau, replace(state, B_e=B)


def _explicit_mohr_coulomb(params, state, root, substeps):
    from dataclasses import replace

    lam_l, mu = _lame(params.E, params.nu)
    C3 = lam_l * np.ones((3, 3)) + 2.0 * mu * np.eye(3)
    c_f = params.c / params.SRF
    phi_f = math.atan(math.tan(params.phi) / params.SRF)
    sphi, cphi = math.sin(phi_f), math.cos(phi_f)
    spsi = math.sin(params.psi_dil)
    B = np.asarray(state.B_e, dtype=float)
    ep_d = state.Ep_d_acc
    ftol_ref = max(2.0 * c_f * cphi, 1.0)
    for _ in range(substeps):
        B_tr = root @ B @ root.T
        lam, P = _eig_desc(B_tr)
        eps = 0.5 * np.log(lam)
        tau_pr = C3 @ eps
        for _ in range(200):
            i1, i3 = int(np.argmax(tau_pr)), int(np.argmin(tau_pr))
            if i1 == i3:
                i1, i3 = 0, 2
            f = (tau_pr[i1] - tau_pr[i3]) + (tau_pr[i1] + tau_pr[i3]) * sphi \
                - 2.0 * c_f * cphi
            if f <= 1e-11 * ftol_ref:
                break
            a = np.zeros(3)
            a[i1] += 1.0 + sphi
            a[i3] += sphi - 1.0
            b = np.zeros(3)
            b[i1] += 1.0 + spsi
            b[i3] += spsi - 1.0
            dlam = f / float(a @ C3 @ b)
            deps_p = dlam * b
            eps = eps - deps_p
            dev = deps_p - deps_p.mean()
            ep_d += math.sqrt(2.0 / 3.0) * float(np.linalg.norm(dev))
            tau_pr = C3 @ eps
        B = (P * np.exp(2.0 * eps)) @ P.T
    lam, P = _eig_desc(B)
    eps = 0.5 * np.log(lam)
    tau_pr = C3 @ eps
    tau = (P * tau_pr) @ P.T
    return tau, replace(state, B_e=B, Ep_d_acc=ep_d)


def _norsand_eta_y(pbar_over_pi, M, N):
    # stress ratio the yield surface allows at p/p_i (compression positive)
    if N == 0.0:
        return M * (1.0 - math.log(pbar_over_pi))
    x = pbar_over_pi ** (N / (1.0 - N))
    return (M / N) * (1.0 - (1.0 - N) * x)


def _norsand_pi_limit(pbar, eta_star, M, N):
    # image pressure putting (pbar, eta_star) on the yield surface
    if N == 0.0:
        return pbar * math.exp(eta_star / M - 1.0)
    base = (1.0 - eta_star * N / M) / (1.0 - N)
    return pbar * base ** (-(1.0 - N) / N)


def _norsand_psi(v, pi_bar, ep_d, params):
    psi = v - params.v_c0 + params.lambda_c * math.log(pi_bar)
    if ep_d <= params.Ep_d_start:
        return psi
    if ep_d >= params.Ep_d_end:
        return 0.0
    fade = (ep_d - params.Ep_d_start) / (params.Ep_d_end - params.Ep_d_start)
    return (1.0 - fade) * psi


def _explicit_norsand(params, state, root, substeps):
    from dataclasses import replace

    mu = params.G_shear
    M, N = params.M_cs, params.N_yield
    Nbar = params.N_bar
    kap = params.kappa
    pbar0 = -state.p0
    ev0 = -state.eps_e_v0
    B = np.asarray(state.B_e, dtype=float)
    pi_bar = -state.p_i
    ep_d = state.Ep_d_acc
    v0 = state.v0
    J = state.v / state.v0
    dJ = float(np.linalg.det(root))
    v = state.v
    gas = False
    for _ in range(substeps):
        J *= dJ
        v = J * v0
        if v > params.v_crit_factor * v0:
            gas = True
            continue
        if gas:
            # re-entry from the gas phase restarts from a stress-free state
            B = np.diag([1.0 + 1e-9, 1.0 + 2e-9, 1.0 + 3e-9])
            gas = False
        B_tr = root @ B @ root.T
        lam, P = _eig_desc(B_tr)
        eps = 0.5 * np.log(lam)
        ev_bar = -eps.sum()
        dev = eps - eps.mean()
        dev_norm = float(np.linalg.norm(dev))
        es = math.sqrt(2.0 / 3.0) * dev_norm
        nhat = dev / dev_norm if dev_norm > 0.0 else np.zeros(3)
        pbar = pbar0 * math.exp((ev_bar - ev0) / kap)
        q = 3.0 * mu * es
        for _ in range(200):
            f = q - pbar * _norsand_eta_y(pbar / pi_bar, M, N)
            if f <= 1e-10 * pbar0:
                break
            psi = _norsand_psi(v, pi_bar, ep_d, params)
            eta_star = M + (1.0 - Nbar) * params.alpha_dil * psi
            pi_lim = _norsand_pi_limit(pbar, eta_star, M, N)
            eta = q / pbar
            b_p = (M - eta) / (1.0 - Nbar)
            if N == 0.0:
                dfdp = -M * math.log(pi_bar / pbar)
                dfdpi = -M * pbar / pi_bar
            else:
                x = (pbar / pi_bar) ** (N / (1.0 - N))
                dfdp = -(M / N) * (1.0 - (1.0 - N) * x) + M * x
                dfdpi = -M * pbar * x / pi_bar
            Kbar = pbar / kap
            denom = dfdp * Kbar * b_p + 3.0 * mu \
                + dfdpi * params.h_hard * (pi_lim - pi_bar)
            dlam = f / denom
            ev_bar -= dlam * b_p
            es = max(es - dlam, 0.0)
            pi_bar += params.h_hard * (pi_lim - pi_bar) * dlam
            ep_d += dlam
            pbar = pbar0 * math.exp((ev_bar - ev0) / kap)
            q = 3.0 * mu * es
        eps = (-ev_bar / 3.0) * np.ones(3) + math.sqrt(1.5) * es * nhat
        B = (P * np.exp(2.0 * eps)) @ P.T
    if gas:
        B = np.diag([1.0 + 1e-9, 1.0 + 2e-9, 1.0 + 3e-9])
        tau = np.zeros((3, 3))
    else:
        lam, P = _eig_desc(B)
        eps = 0.5 * np.log(lam)
        ev_bar = -eps.sum()
        dev = eps - eps.mean()
        es = math.sqrt(2.0 / 3.0) * float(np.linalg.norm(dev))
        nd = float(np.linalg.norm(dev))
        nhat = dev / nd if nd > 0.0 else np.zeros(3)
        pbar = pbar0 * math.exp((ev_bar - ev0) / kap)
        q = 3.0 * mu * es
        tau_pr = -pbar * np.ones(3) + math.sqrt(2.0 / 3.0) * q * nhat
        tau = (P * tau_pr) @ P.T
    new_state = replace(
        state, B_e=B, Ep_d_acc=ep_d, p_i=-pi_bar, v=v
    )
    return tau, new_state
