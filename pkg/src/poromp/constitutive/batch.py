"""Vectorized stress updates for whole particle populations.

The scalar routines in ``elastic``/``mohr_coulomb``/``norsand`` stay the
reference implementations; the `_many` paths here evaluate the same formulas
on (n, ...) arrays so the grid solver can update thousands of points per step
at numpy speed.  Mohr-Coulomb runs its full plane/edge/apex cascade
vectorized.  The Nor-Sand return mapping runs a lockstep Newton over the
yielding subset and falls back to the scalar routine for the rare points it
cannot close (nose returns, domain breakdowns), which keeps the two paths
behaviorally identical.
"""

import math

import numpy as np

from .elastic import principal_stiffness
from .invariants import eig_desc_many
from .mohr_coulomb import _plastic_return
from .norsand import norsand_update
from .state import GAS_PHASE_BE, ConstitutiveState

__all__ = [
    "elastic_update_many",
    "mohr_coulomb_update_many",
    "norsand_update_many",
    "material_update_arrays",
]

_SQ23 = math.sqrt(2.0 / 3.0)
_SQ32 = math.sqrt(1.5)


def _push_forward(dF, B_e, label):
    dF = np.asarray(dF, dtype=float)
    dets = np.linalg.det(dF)
    bad = np.flatnonzero(dets <= 0.0)
    if bad.size:
        raise ValueError(
            "increment inverts the element (det dF <= 0) at "
            f"{label} particles {bad[:10].tolist()}")
    B_tr = np.einsum("pij,pjk,plk->pil", dF, B_e, dF)
    P, lam = eig_desc_many(B_tr)
    bad = np.flatnonzero(lam[:, 2] <= 0.0)
    if bad.size:
        raise ValueError(
            "trial elastic tensor lost positive definiteness at "
            f"{label} particles {bad[:10].tolist()}")
    return B_tr, P, lam


def _compose(P, diag):
    return np.einsum("pij,pj,pkj->pik", P, diag, P)


def elastic_update_many(B_e, dF, params):
    """Hencky elasticity for (n, 3, 3) stacks; returns ``(tau, B_e_new)``."""
    B_tr, P, lam = _push_forward(dF, B_e, "elastic")
    eps = 0.5 * np.log(lam)
    lam_l, mu = params.lame
    tau_pr = lam_l * eps.sum(axis=1)[:, None] + 2.0 * mu * eps
    return _compose(P, tau_pr), B_tr


def mohr_coulomb_update_many(B_e, dF, Ep_d, params):
    """Mohr-Coulomb elastic predictor / return mapping on particle stacks.

    Returns ``(tau, B_e_new, Ep_d_new)``.  The return mapping itself is the
    scalar ``_plastic_return`` applied to the yielding subset; with quadratic
    splines that subset is a small fraction of the body except during global
    failure, and the trial (the expensive eigendecomposition part) is always
    vectorized.
    """
    B_tr, P, lam = _push_forward(dF, B_e, "mohr_coulomb")
    eps_tr = 0.5 * np.log(lam)
    lam_l, mu = params.lame
    C = principal_stiffness(lam_l, mu)
    tau_tr = eps_tr @ C.T

    c_f, phi_f = params.reduced
    sphi, cphi = math.sin(phi_f), math.cos(phi_f)
    spsi = math.sin(params.psi_dil)
    ccos = 2.0 * c_f * cphi
    scale = np.maximum(np.abs(tau_tr).max(axis=1), max(ccos, 1.0))
    ftol = 1e-10 * scale
    f_tr = (tau_tr[:, 0] - tau_tr[:, 2]) \
        + (tau_tr[:, 0] + tau_tr[:, 2]) * sphi - ccos

    plastic = np.flatnonzero(f_tr > ftol)
    tau = _compose(P, tau_tr)
    ep_new = np.asarray(Ep_d, dtype=float).copy()
    if plastic.size == 0:
        return tau, B_tr, ep_new

    B_new = B_tr.copy()
    for p in plastic:
        eps_p = _plastic_return(
            eps_tr[p], tau_tr[p], C, sphi, cphi, spsi, c_f,
            float(ftol[p]), float(scale[p]))
        deps = eps_tr[p] - eps_p
        dev = deps - deps.mean()
        ep_new[p] += _SQ23 * float(np.linalg.norm(dev))
        tau_p = C @ eps_p
        B_new[p] = (P[p] * np.exp(2.0 * eps_p)) @ P[p].T
        tau[p] = (P[p] * tau_p) @ P[p].T
    return tau, B_new, ep_new


def _eta_yield_many(ratio, M, N):
    if N == 0.0:
        return M * (1.0 - np.log(ratio))
    return (M / N) * (1.0 - (1.0 - N) * ratio ** (N / (1.0 - N)))


def _pi_limit_many(pbar, eta_star, M, N):
    # returns nan where the limit ratio leaves the yield shape; the caller
    # routes those rows to the scalar path, which raises the domain error
    if N == 0.0:
        return pbar * np.exp(eta_star / M - 1.0)
    base = (1.0 - eta_star * N / M) / (1.0 - N)
    return pbar * np.where(base > 0.0, base, np.nan) ** (-(1.0 - N) / N)


def _psi_many(v, pi, ep_d, params):
    psi = v - params.v_c0 + params.lambda_c * np.log(pi)
    span = params.Ep_d_end - params.Ep_d_start
    fade = np.clip(1.0 - (ep_d - params.Ep_d_start) / span, 0.0, 1.0)
    return fade * psi


def _lockstep_newton(x, lb, typ, resfun):
    """Damped Newton iterations run in lockstep over independent rows.

    ``x`` (m, k) holds the initial guesses, ``lb`` elementwise lower bounds
    (-inf where unclamped), ``typ`` the typical magnitudes for the forward
    differences.  ``resfun(x_rows, rows)`` evaluates the residual rows for
    the given row indices.  Mirrors the scalar loop: 50 iterations, Jacobian
    by projected forward differences with h = 1e-7 max(|x|, typ),
    half-stepping line search that accepts its last trial.  Returns
    ``(x, ok)``; rows failing (singular Jacobian, non-finite residuals, no
    convergence) keep ``ok`` False and are the caller's problem.
    """
    m, k = x.shape
    ok = np.zeros(m, dtype=bool)
    alive = np.arange(m)
    r = resfun(x, alive)
    for _ in range(50):
        with np.errstate(invalid="ignore"):
            rnorm = np.abs(r).max(axis=1)
        bad = ~np.isfinite(rnorm)
        conv = (rnorm < 1e-10) & ~bad
        ok[alive[conv]] = True
        keep = ~(conv | bad)
        alive = alive[keep]
        if alive.size == 0:
            break
        x_a, r_a = x[alive], r[keep]
        lb_a, typ_a = lb[alive], typ[alive]
        J = np.empty((alive.size, k, k))
        for j in range(k):
            hj = 1e-7 * np.maximum(np.abs(x_a[:, j]), typ_a[:, j])
            xp = x_a.copy()
            xp[:, j] += hj
            J[:, :, j] = (resfun(np.maximum(xp, lb_a), alive) - r_a) \
                / hj[:, None]
        with np.errstate(invalid="ignore"):
            dets = np.linalg.det(J)
            sing = ~np.isfinite(dets) | (np.abs(dets) < 1e-300)
        if sing.any():
            J[sing] = np.eye(k)
        with np.errstate(all="ignore"):
            dx = np.linalg.solve(J, -r_a[:, :, None])[:, :, 0]
        norm0 = np.abs(r_a).max(axis=1)
        alpha = np.ones(alive.size)
        x_new = np.maximum(x_a + dx, lb_a)
        r_new = resfun(x_new, alive)
        for _ in range(11):
            with np.errstate(invalid="ignore"):
                worse = ~(np.abs(r_new).max(axis=1) < norm0)
            if not worse.any():
                break
            wr = np.flatnonzero(worse)
            alpha[wr] *= 0.5
            x_try = np.maximum(x_a[wr] + alpha[wr, None] * dx[wr], lb_a[wr])
            r_try = resfun(x_try, alive[wr])
            x_new[wr] = x_try
            r_new[wr] = r_try
        x_new[sing] = x_a[sing]
        r_new[sing] = np.nan
        x[alive] = x_new
        r = r_new
    return x, ok


def _ns_newton_many(ctx, params):
    """Regular four-variable return over (ev, es, dlam, pi_bar) rows."""
    m = ctx["ev_tr"].shape[0]
    M, N, Nbar = params.M_cs, params.N_yield, params.N_bar
    pbar0 = ctx["pbar0"]

    def resfun(x, rows):
        ev, es, dlam, pi = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
        p0r = pbar0[rows]
        with np.errstate(all="ignore"):
            pbar = p0r * np.exp((ev - ctx["ev0"][rows]) / params.kappa)
            q = 3.0 * ctx["mu"] * es
            eta = q / pbar
            psi = _psi_many(ctx["v"][rows], pi, ctx["ep_d"][rows], params)
            eta_star = M + (1.0 - Nbar) * params.alpha_dil * psi
            pi_lim = _pi_limit_many(pbar, eta_star, M, N)
            b_p = (M - eta) / (1.0 - Nbar)
            r = np.stack([
                ev - ctx["ev_tr"][rows] + dlam * b_p,
                es - ctx["es_tr"][rows] + dlam,
                (pi - ctx["pi_n"][rows]
                 - params.h_hard * (pi_lim - pi) * dlam) / p0r,
                (q - pbar * _eta_yield_many(pbar / pi, M, N)) / p0r,
            ], axis=1)
        return r

    x0 = np.stack([ctx["ev_tr"], ctx["es_tr"], np.zeros(m), ctx["pi_n"]],
                  axis=1)
    lb = np.stack([np.full(m, -np.inf), np.zeros(m), np.zeros(m),
                   1e-8 * pbar0], axis=1)
    typ = np.stack([np.full(m, 1e-4)] * 3 + [0.01 * pbar0], axis=1)
    return _lockstep_newton(x0, lb, typ, resfun)


def _ns_nose_newton_many(ctx, params):
    """Consolidation onto the q = 0 nose for rows the regular return cannot
    close; two unknowns (dlam, pi_bar) with pbar pinned at nose_ratio*pi."""
    from .norsand import _nose_ratio

    m = ctx["ev_tr"].shape[0]
    M, N, Nbar = params.M_cs, params.N_yield, params.N_bar
    pbar0 = ctx["pbar0"]
    b_p = M / (1.0 - Nbar)
    nose = _nose_ratio(N)

    def resfun(x, rows):
        dlam, pi = x[:, 0], x[:, 1]
        p0r = pbar0[rows]
        with np.errstate(all="ignore"):
            pbar = p0r * np.exp(
                (ctx["ev_tr"][rows] - dlam * b_p - ctx["ev0"][rows])
                / params.kappa)
            psi = _psi_many(ctx["v"][rows], pi, ctx["ep_d"][rows], params)
            eta_star = M + (1.0 - Nbar) * params.alpha_dil * psi
            pi_lim = _pi_limit_many(pbar, eta_star, M, N)
            r = np.stack([
                (pi - ctx["pi_n"][rows]
                 - params.h_hard * (pi_lim - pi) * dlam) / p0r,
                (pbar - nose * pi) / p0r,
            ], axis=1)
        return r

    x0 = np.stack([ctx["es_tr"], ctx["pi_n"]], axis=1)
    lb = np.stack([np.zeros(m), 1e-8 * pbar0], axis=1)
    typ = np.stack([np.full(m, 1e-4), 0.01 * pbar0], axis=1)
    x, ok = _lockstep_newton(x0, lb, typ, resfun)
    # a multiplier below the trial deviator belongs to the regular return;
    # reject so the scalar path re-derives (and reports) the state
    ok &= x[:, 0] >= ctx["es_tr"] - 1e-14
    return x, ok


def norsand_update_many(B_e, dF, J_bar, Ep_d, p_i, v, v0, p0, eps_e_v0,
                        params, yield_enabled=True):
    """Nor-Sand update on particle stacks.

    Returns ``(tau, B_e_new, Ep_d_new, p_i_new, v_new)``.  With
    ``yield_enabled`` False only the hyperelastic trial is evaluated (the
    elastic gravity-ramp phase), so the image pressure may still be unset.
    """
    n = B_e.shape[0]
    J_bar = np.asarray(J_bar, dtype=float)
    if np.any(J_bar <= 0.0):
        bad = np.flatnonzero(J_bar <= 0.0)
        raise ValueError("stabilized Jacobian must be positive at particles "
                         f"{bad[:10].tolist()}")
    v_new = J_bar * np.asarray(v0, dtype=float)
    ep_new = np.asarray(Ep_d, dtype=float).copy()
    pi_new = np.asarray(p_i, dtype=float).copy()
    tau = np.zeros((n, 3, 3))
    B_new = np.empty((n, 3, 3))

    gas = v_new > params.v_crit_factor * np.asarray(v0, dtype=float)
    B_new[gas] = GAS_PHASE_BE
    live = np.flatnonzero(~gas)
    if live.size == 0:
        return tau, B_new, ep_new, pi_new, v_new

    pbar0 = -np.asarray(p0, dtype=float)[live]
    if np.any(pbar0 <= 0.0):
        bad = live[pbar0 <= 0.0]
        raise ValueError("reference pressure must be compressive at "
                         f"particles {bad[:10].tolist()}")
    ev0 = -np.asarray(eps_e_v0, dtype=float)[live]
    B_tr, P, lam = _push_forward(np.asarray(dF, dtype=float)[live],
                                 np.asarray(B_e, dtype=float)[live],
                                 "norsand")
    eps_tr = 0.5 * np.log(lam)
    ev_tr = -eps_tr.sum(axis=1)
    dev = eps_tr - eps_tr.mean(axis=1)[:, None]
    dev_norm = np.linalg.norm(dev, axis=1)
    es_tr = _SQ23 * dev_norm
    with np.errstate(invalid="ignore"):
        nhat = np.where(dev_norm[:, None] > 0.0, dev / dev_norm[:, None], 0.0)

    mu = params.G_shear
    pbar_tr = pbar0 * np.exp((ev_tr - ev0) / params.kappa)
    q_tr = 3.0 * mu * es_tr

    ev, es = ev_tr.copy(), es_tr.copy()
    dlam = np.zeros(live.size)
    pi_bar = -pi_new[live]

    if yield_enabled:
        if np.any(pi_bar <= 0.0):
            bad = live[pi_bar <= 0.0]
            raise ValueError(
                "image pressure must be compressive at particles "
                f"{bad[:10].tolist()}; did initialization run?")
        f_tr = q_tr - pbar_tr * _eta_yield_many(pbar_tr / pi_bar,
                                                params.M_cs, params.N_yield)
        yi = np.flatnonzero(f_tr > 1e-10 * pbar0)
        if yi.size:
            ctx = {"ev_tr": ev_tr[yi], "es_tr": es_tr[yi],
                   "pi_n": pi_bar[yi], "v": v_new[live][yi],
                   "ep_d": ep_new[live][yi], "pbar0": pbar0[yi],
                   "ev0": ev0[yi], "mu": mu}
            xsol, ok = _ns_newton_many(ctx, params)
            good = np.flatnonzero(ok)
            gi = yi[good]
            ev[gi] = xsol[good, 0]
            es[gi] = xsol[good, 1]
            dlam[gi] = xsol[good, 2]
            pi_bar[gi] = xsol[good, 3]
            hard = np.flatnonzero(~ok)
            if hard.size:
                ctx2 = {key: (val[hard] if isinstance(val, np.ndarray)
                              else val) for key, val in ctx.items()}
                x2, ok2 = _ns_nose_newton_many(ctx2, params)
                ni = yi[hard[ok2]]
                b_nose = params.M_cs / (1.0 - params.N_bar)
                ev[ni] = ctx2["ev_tr"][ok2] - x2[ok2, 0] * b_nose
                es[ni] = 0.0
                dlam[ni] = x2[ok2, 0]
                pi_bar[ni] = x2[ok2, 1]
                hard = hard[~ok2]
            for k in hard:
                p = yi[k]
                g = live[p]
                state = ConstitutiveState(
                    B_e=np.asarray(B_e, dtype=float)[g],
                    Ep_d_acc=float(ep_new[g]), p_i=float(pi_new[g]),
                    v=float(np.asarray(v, dtype=float)[g]),
                    v0=float(np.asarray(v0, dtype=float)[g]),
                    p0=float(np.asarray(p0, dtype=float)[g]),
                    eps_e_v0=float(np.asarray(eps_e_v0, dtype=float)[g]))
                tau_s, B_s, st = norsand_update(
                    state, np.asarray(dF, dtype=float)[g], state.B_e,
                    float(J_bar[g]), params)
                tau[g] = tau_s
                B_new[g] = B_s
                ep_new[g] = st.Ep_d_acc
                pi_new[g] = st.p_i
                # overwrite below is skipped by masking the row out
                ev[p] = np.nan
            done = ~np.isfinite(ev)
        else:
            done = np.zeros(live.size, dtype=bool)
    else:
        done = np.zeros(live.size, dtype=bool)

    todo = ~done
    pbar = pbar0 * np.exp((ev - ev0) / params.kappa)
    q = 3.0 * mu * es
    eps_new = (-ev[:, None] / 3.0) + _SQ32 * es[:, None] * nhat
    tau_pr = -pbar[:, None] + _SQ23 * q[:, None] * nhat
    li = live[todo]
    B_new[li] = _compose(P[todo], np.exp(2.0 * eps_new[todo]))
    tau[li] = _compose(P[todo], tau_pr[todo])
    ep_new[li] += dlam[todo]
    pi_new[li] = -pi_bar[todo]
    return tau, B_new, ep_new, pi_new, v_new


def material_update_arrays(model, soil, dF, J_bar=None, plasticity_on=True):
    """Advance a ``SoilPoints`` container in place; returns the Kirchhoff
    stress stack.  ``J_bar`` defaults to det(dF)-accumulated values only for
    Nor-Sand, matching the scalar dispatcher."""
    if model.name == "elastic" or (model.name == "mohr_coulomb"
                                   and not plasticity_on):
        tau, B_new = elastic_update_many(soil.B_e, dF, model.params)
        soil.B_e[...] = B_new
    elif model.name == "mohr_coulomb":
        tau, B_new, ep = mohr_coulomb_update_many(
            soil.B_e, dF, soil.Ep_d, model.params)
        soil.B_e[...] = B_new
        soil.Ep_d[...] = ep
    else:
        if J_bar is None:
            J_bar = (soil.v / soil.v0) * np.linalg.det(np.asarray(dF))
        tau, B_new, ep, pi, v_new = norsand_update_many(
            soil.B_e, dF, J_bar, soil.Ep_d, soil.p_i, soil.v, soil.v0,
            soil.p0, soil.eps_e_v0, model.params,
            yield_enabled=plasticity_on)
        soil.B_e[...] = B_new
        soil.Ep_d[...] = ep
        soil.p_i[...] = pi
        soil.v[...] = v_new
    soil.tau[...] = tau
    return tau
