"""Critical-state sand model with an implicit principal-space return mapping.

The elasticity is hyperelastic with a pressure-proportional bulk stiffness,
p = p0 exp(-(eps_v^e - eps_v0)/kappa) and q = 3 G eps_s^e, and the yield
surface is the bullet-shaped Nor-Sand family

    F = q - p_bar * eta_y(p_bar / p_i_bar)

written here in compression-positive magnitudes p_bar = -p, p_i_bar = -p_i.
Plastic flow uses the image-pressure-pinned potential, giving the dilatancy
relation d eps_v^p / d eps_s^p = (eta - M) / (1 - N_bar) in tension-positive
volumetric strain.  Hardening drives the image pressure toward the limit
value set by the maximum dilatancy D* = alpha * psi_i.

Large-deformation guards: the specific volume advances with the smoothed
Jacobian (v = J_bar v0), the state parameter fades out once the accumulated
deviatoric plastic strain passes the cutoff window, and a point whose
specific volume exceeds v_crit = v_crit_factor * v0 turns into a stress-free
gas phase until recompacted.
"""

import math
from dataclasses import replace

import numpy as np

from .invariants import eigendecompose_sym3
from .state import GAS_PHASE_BE

__all__ = [
    "norsand_update",
    "dilatancy_cutoff_psi",
    "gas_phase_check",
    "initialize_norsand_site",
]

_SQ23 = math.sqrt(2.0 / 3.0)
_SQ32 = math.sqrt(1.5)


def dilatancy_cutoff_psi(v, p_i, Ep_d_acc, params):
    """State parameter psi_i with the large-strain cutoff fade.

    ``p_i`` is tension positive, so it must be negative (compressive);
    its magnitude enters a natural log in Pa.
    """
    if p_i >= 0.0:
        raise ValueError("image pressure must be compressive (p_i < 0)")
    if Ep_d_acc >= params.Ep_d_end:
        return 0.0
    psi = v - params.v_c0 + params.lambda_c * math.log(-p_i)
    if Ep_d_acc <= params.Ep_d_start:
        return psi
    fade = (Ep_d_acc - params.Ep_d_start) / (params.Ep_d_end - params.Ep_d_start)
    return (1.0 - fade) * psi


def gas_phase_check(state, params):
    """Reset a point to the stress-free gas phase when v > v_crit.

    Idempotent; leaves the state untouched below the critical specific
    volume.  The elastic tensor is set to slightly anisotropic near-identity
    values so downstream eigendecompositions stay well posed.
    """
    if state.v > params.v_crit_factor * state.v0:
        return replace(state, B_e=GAS_PHASE_BE.copy())
    return state


def _eta_yield(ratio, M, N):
    # stress ratio admitted by the yield surface at p_bar/p_i_bar = ratio
    if N == 0.0:
        return M * (1.0 - math.log(ratio))
    return (M / N) * (1.0 - (1.0 - N) * ratio ** (N / (1.0 - N)))


def _pi_limit(pbar, eta_star, M, N):
    # image pressure that puts (pbar, eta_star) on the yield surface
    if N == 0.0:
        return pbar * math.exp(eta_star / M - 1.0)
    base = (1.0 - eta_star * N / M) / (1.0 - N)
    if base <= 0.0:
        raise FloatingPointError("limit stress ratio beyond the yield shape")
    return pbar * base ** (-(1.0 - N) / N)


def _nose_ratio(N):
    # pbar/pi_bar at the q = 0 apex of the surface, where eta_y vanishes
    if N == 0.0:
        return math.e
    return (1.0 / (1.0 - N)) ** ((1.0 - N) / N)


def norsand_update(state, dF, B_e_prev, J_bar, params):
    """Implicit stress update; returns ``(tau, B_e_new, new_state)``.

    The trial state comes from pushing ``B_e_prev`` forward with ``dF``;
    a violated yield condition is resolved by a Newton iteration on the
    four unknowns (elastic volumetric strain, elastic deviatoric strain,
    plastic multiplier, image pressure).
    """
    if J_bar <= 0.0:
        raise ValueError("stabilized Jacobian must be positive")
    v_new = J_bar * state.v0
    if v_new > params.v_crit_factor * state.v0:
        new_state = replace(state, B_e=GAS_PHASE_BE.copy(), v=v_new)
        return np.zeros((3, 3)), GAS_PHASE_BE.copy(), new_state

    dF = np.asarray(dF, dtype=float)
    if np.linalg.det(dF) <= 0.0:
        raise ValueError("increment inverts the element (det dF <= 0)")
    B_tr = dF @ np.asarray(B_e_prev, dtype=float) @ dF.T
    P, lam_tr = eigendecompose_sym3(B_tr)
    if lam_tr[2] <= 0.0:
        raise ValueError("trial elastic tensor lost positive definiteness")
    eps_tr = 0.5 * np.log(lam_tr)

    mu = params.G_shear
    M, N, Nbar = params.M_cs, params.N_yield, params.N_bar
    kap = params.kappa
    pbar0 = -state.p0
    ev0 = -state.eps_e_v0
    if pbar0 <= 0.0:
        raise ValueError("reference pressure must be compressive")

    ev_tr = -eps_tr.sum()
    dev = eps_tr - eps_tr.mean()
    dev_norm = float(np.linalg.norm(dev))
    es_tr = _SQ23 * dev_norm
    nhat = dev / dev_norm if dev_norm > 0.0 else np.zeros(3)

    pi_bar = -state.p_i
    if pi_bar <= 0.0:
        raise ValueError("image pressure must be compressive; "
                         "did initialization run?")

    def p_of(ev):
        return pbar0 * math.exp((ev - ev0) / kap)

    pbar_tr = p_of(ev_tr)
    q_tr = 3.0 * mu * es_tr
    f_tr = q_tr - pbar_tr * _eta_yield(pbar_tr / pi_bar, M, N)
    ftol = 1e-10 * pbar0

    if f_tr <= ftol:
        ev, es, pi_new, dlam = ev_tr, es_tr, pi_bar, 0.0
    else:
        try:
            ev, es, dlam, pi_new = _return_map(
                ev_tr, es_tr, pi_bar, v_new, state.Ep_d_acc,
                p_of, mu, params, pbar0)
        except RuntimeError:
            # a (near-)isotropic trial beyond the q = 0 nose has no regular
            # return: the flow rule ties volumetric plastic strain to shear
            # flow, and the trial deviator caps the multiplier.  Return to
            # the nose itself instead, the analogue of an apex return.
            ev, dlam, pi_new = _nose_return(
                ev_tr, es_tr, pi_bar, v_new, state.Ep_d_acc,
                p_of, params, pbar0)
            es = 0.0

    pbar = p_of(ev)
    q = 3.0 * mu * es
    eps_new = (-ev / 3.0) * np.ones(3) + _SQ32 * es * nhat
    tau_pr = -pbar * np.ones(3) + _SQ23 * q * nhat
    B_e_new = (P * np.exp(2.0 * eps_new)) @ P.T
    tau = (P * tau_pr) @ P.T
    new_state = replace(
        state, B_e=B_e_new, Ep_d_acc=state.Ep_d_acc + dlam,
        p_i=-pi_new, v=v_new)
    return tau, B_e_new, new_state


def _nose_return(ev_tr, es_tr, pi_n, v, ep_d_n, p_of, params, pbar0):
    """Volumetric consolidation onto the q = 0 apex of the surface.

    The deviator is fully consumed (es = 0) and the multiplier follows
    from the volumetric flow at eta = 0, dE_v^p = dlam*M/(1-N_bar), so
    the two unknowns (dlam, pi_bar) close consistency on the nose
    pbar = nose_ratio*pi_bar together with the hardening law.
    """
    M, N, Nbar = params.M_cs, params.N_yield, params.N_bar
    h = params.h_hard
    b_p = M / (1.0 - Nbar)
    nose = _nose_ratio(N)

    def residuals(x):
        dlam, pi = x
        pbar = p_of(ev_tr - dlam * b_p)
        psi = dilatancy_cutoff_psi(v, -pi, ep_d_n, params)
        eta_star = M + (1.0 - Nbar) * params.alpha_dil * psi
        pi_lim = _pi_limit(pbar, eta_star, M, N)
        return np.array([
            (pi - pi_n - h * (pi_lim - pi) * dlam) / pbar0,
            (pbar - nose * pi) / pbar0,
        ])

    def project(x):
        x[0] = max(x[0], 0.0)
        x[1] = max(x[1], 1e-8 * pbar0)
        return x

    x = np.array([es_tr, pi_n])
    r = residuals(x)
    history = [float(np.abs(r).max())]
    typ = np.array([1e-4, 0.01 * pbar0])
    for _ in range(50):
        if history[-1] < 1e-10:
            break
        J = np.empty((2, 2))
        for j in range(2):
            hj = 1e-7 * max(abs(x[j]), typ[j])
            xp = x.copy()
            xp[j] += hj
            J[:, j] = (residuals(project(xp)) - r) / hj
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                f"nose return Jacobian singular; residuals {history}") from exc
        alpha = 1.0
        norm0 = float(np.abs(r).max())
        for _ in range(12):
            x_new = project(x + alpha * dx)
            r_new = residuals(x_new)
            if float(np.abs(r_new).max()) < norm0:
                break
            alpha *= 0.5
        x, r = x_new, r_new
        history.append(float(np.abs(r).max()))
    if history[-1] >= 1e-10:
        raise RuntimeError(
            "Nor-Sand nose return failed to converge; "
            f"residual history {history}")
    dlam, pi = x
    if dlam < es_tr - 1e-14:
        raise RuntimeError(
            "nose return produced a multiplier smaller than the trial "
            "deviator; the regular return should have handled this state")
    return ev_tr - dlam * b_p, dlam, pi


def _return_map(ev_tr, es_tr, pi_n, v, ep_d_n, p_of, mu, params, pbar0):
    M, N, Nbar = params.M_cs, params.N_yield, params.N_bar
    h = params.h_hard

    def residuals(x):
        ev, es, dlam, pi = x
        pbar = p_of(ev)
        q = 3.0 * mu * es
        eta = q / pbar
        psi = dilatancy_cutoff_psi(v, -pi, ep_d_n, params)
        eta_star = M + (1.0 - Nbar) * params.alpha_dil * psi
        pi_lim = _pi_limit(pbar, eta_star, M, N)
        b_p = (M - eta) / (1.0 - Nbar)
        return np.array([
            ev - ev_tr + dlam * b_p,
            es - es_tr + dlam,
            (pi - pi_n - h * (pi_lim - pi) * dlam) / pbar0,
            (q - pbar * _eta_yield(pbar / pi, M, N)) / pbar0,
        ])

    def project(x):
        x[1] = max(x[1], 0.0)
        x[2] = max(x[2], 0.0)
        x[3] = max(x[3], 1e-8 * pbar0)
        return x

    x = np.array([ev_tr, es_tr, 0.0, pi_n])
    r = residuals(x)
    history = [float(np.abs(r).max())]
    typ = np.array([1e-4, 1e-4, 1e-4, 0.01 * pbar0])
    for _ in range(50):
        if history[-1] < 1e-10:
            return tuple(x)
        J = np.empty((4, 4))
        for j in range(4):
            hj = 1e-7 * max(abs(x[j]), typ[j])
            xp = x.copy()
            xp[j] += hj
            J[:, j] = (residuals(project(xp)) - r) / hj
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                f"return mapping Jacobian singular; residuals {history}") from exc
        alpha = 1.0
        norm0 = float(np.abs(r).max())
        for _ in range(12):
            x_new = project(x + alpha * dx)
            r_new = residuals(x_new)
            if float(np.abs(r_new).max()) < norm0:
                break
            alpha *= 0.5
        x, r = x_new, r_new
        history.append(float(np.abs(r).max()))
    if history[-1] < 1e-10:
        return tuple(x)
    raise RuntimeError(
        "Nor-Sand return mapping failed to converge; "
        f"residual history {history}")


def initialize_norsand_site(particles, ramp, params):
    """Freeze the hyperelastic reference state after the gravity ramp.

    ``particles`` must expose the arrays ``tau`` (Kirchhoff stress), ``B_e``,
    ``J`` plus the writable state arrays ``p0``, ``eps_e_v0``, ``p_i``,
    ``v`` and ``v0``.  With no ramp (``ramp is None`` or zero duration) the
    2 kPa seed reference is kept.  Returns the mutated container.
    """
    n = particles.B_e.shape[0]
    if ramp is None or getattr(ramp, "t_end", 0.0) == 0.0:
        p0 = np.full(n, -2000.0)
        eps_v0 = np.zeros(n)
    else:
        p0 = np.trace(particles.tau, axis1=1, axis2=2) / 3.0
        tensile = np.flatnonzero(p0 >= 0.0)
        if tensile.size:
            raise ValueError(
                "gravity ramp left tensile reference pressure at particles "
                f"{tensile[:10].tolist()} (showing up to 10 of {tensile.size})")
        # tr(E^e) = 0.5 ln det(B_e), no eigendecomposition needed
        eps_v0 = 0.5 * np.log(np.linalg.det(particles.B_e))
    particles.p0[:] = p0
    particles.eps_e_v0[:] = eps_v0
    N = params.N_yield
    if N == 0.0:
        particles.p_i[:] = params.OCR * p0 / math.e
    else:
        particles.p_i[:] = params.OCR * p0 * (1.0 - N) ** ((1.0 - N) / N)
    particles.v0[:] = particles.J * particles.v0
    particles.v[:] = particles.v0
    return particles
