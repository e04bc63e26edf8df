"""Mohr-Coulomb return mapping in principal logarithmic-strain space.

The trial Kirchhoff stress is diagonalized, returned to the yield surface
with the classical main-plane / edge / apex scheme, and the elastic tensor
is rebuilt from the corrected principal strains on the trial eigenvectors.
Tension is positive and principal stresses are kept sorted descending, so
the active yield function is

    F = (s1 - s3) + (s1 + s3) sin(phi_f) - 2 c_f cos(phi_f)

with the reduced strength c_f = c/SRF, tan(phi_f) = tan(phi)/SRF.
"""

import math

import numpy as np

from .elastic import principal_stiffness
from .invariants import eigendecompose_sym3

__all__ = ["mohr_coulomb_update"]

# plane normals in (sigma1, sigma2, sigma3) space; rows select the stress
# pair entering F = s_i - s_j + (s_i + s_j) sin(phi) - 2 c cos(phi)
_PAIRS = {"13": (0, 2), "23": (1, 2), "12": (0, 1)}


def _flow_vector(pair, s):
    a = np.zeros(3)
    i, j = _PAIRS[pair]
    a[i] = 1.0 + s
    a[j] = s - 1.0
    return a


def _yield_value(tau, pair, sphi, ccos):
    i, j = _PAIRS[pair]
    return (tau[i] - tau[j]) + (tau[i] + tau[j]) * sphi - ccos


def mohr_coulomb_update(state, dF, B_e_prev, params):
    """Elastic predictor / plastic corrector for Mohr-Coulomb.

    Returns ``(tau, B_e_new, Ep_d_acc)`` where the accumulated deviatoric
    plastic strain has grown by sqrt(2/3)|dev(d eps_p)| of this step.
    """
    dF = np.asarray(dF, dtype=float)
    if np.linalg.det(dF) <= 0.0:
        raise ValueError("increment inverts the element (det dF <= 0)")
    B_tr = dF @ np.asarray(B_e_prev, dtype=float) @ dF.T
    P, lam_tr = eigendecompose_sym3(B_tr)
    if lam_tr[2] <= 0.0:
        raise ValueError("trial elastic tensor lost positive definiteness")
    eps_tr = 0.5 * np.log(lam_tr)

    lam_l, mu = params.lame
    C = principal_stiffness(lam_l, mu)
    tau_tr = C @ eps_tr

    c_f, phi_f = params.reduced
    sphi, cphi = math.sin(phi_f), math.cos(phi_f)
    spsi = math.sin(params.psi_dil)
    ccos = 2.0 * c_f * cphi
    scale = max(abs(tau_tr).max(), ccos, 1.0)
    ftol = 1e-10 * scale

    f_tr = _yield_value(tau_tr, "13", sphi, ccos)
    if f_tr <= ftol:
        B_e_new = (P * lam_tr) @ P.T
        return (P * tau_tr) @ P.T, B_e_new, state.Ep_d_acc

    eps_new = _plastic_return(eps_tr, tau_tr, C, sphi, cphi, spsi, c_f, ftol, scale)
    deps_p = eps_tr - eps_new
    dev = deps_p - deps_p.mean()
    ep_acc = state.Ep_d_acc + math.sqrt(2.0 / 3.0) * float(np.linalg.norm(dev))
    tau_pr = C @ eps_new
    B_e_new = (P * np.exp(2.0 * eps_new)) @ P.T
    return (P * tau_pr) @ P.T, B_e_new, ep_acc


def _plastic_return(eps_tr, tau_tr, C, sphi, cphi, spsi, c_f, ftol, scale):
    ccos = 2.0 * c_f * cphi
    otol = 1e-9 * scale

    def valid(tau):
        return tau[0] >= tau[1] - otol and tau[1] >= tau[2] - otol

    # single-plane return on the (s1, s3) plane
    a = _flow_vector("13", sphi)
    b = _flow_vector("13", spsi)
    f_tr = _yield_value(tau_tr, "13", sphi, ccos)
    dl = f_tr / float(a @ C @ b)
    eps = eps_tr - dl * b
    tau = C @ eps
    if dl >= 0.0 and valid(tau):
        return eps

    # two-plane (edge) returns; the valid one keeps both multipliers
    # non-negative and the principal ordering intact
    for other in ("23", "12"):
        pairs = ("13", other)
        A = np.array([[float(_flow_vector(p, sphi) @ C @ _flow_vector(pp, spsi))
                       for pp in pairs] for p in pairs])
        rhs = np.array([_yield_value(tau_tr, p, sphi, ccos) for p in pairs])
        try:
            dls = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            continue
        if np.any(dls < -1e-12):
            continue
        eps = eps_tr - dls[0] * _flow_vector("13", spsi) \
            - dls[1] * _flow_vector(other, spsi)
        tau = C @ eps
        if valid(tau) and _yield_value(tau, "13", sphi, ccos) <= ftol:
            return eps

    # apex: all deviatoric elastic strain wiped, mean stress at c cot(phi)
    if sphi <= 0.0:
        raise ArithmeticError(
            "return-mapping selection failed: apex undefined for phi = 0; "
            f"trial principal stresses {tau_tr}")
    K = float(C[0].sum()) / 3.0
    p_apex = c_f * cphi / sphi
    return (p_apex / (3.0 * K)) * np.ones(3)
