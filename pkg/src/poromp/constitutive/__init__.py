"""Finite-strain constitutive models updated in principal logarithmic space.

Every update consumes an incremental deformation gradient and the previous
(optionally patch-averaged) elastic left Cauchy-Green tensor, and returns a
tension-positive Kirchhoff stress.  The ``MaterialModel`` bundle plus the
``material_*`` dispatchers give the single-element drivers and tests one
uniform way to exercise any of the models.
"""

import math
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .invariants import eig_desc_many, eigendecompose_sym3, log_strain
from .state import (
    GAS_PHASE_BE,
    ConstitutiveState,
    ElasticParams,
    MohrCoulombParams,
    NorSandParams,
)
from .elastic import hencky_elastic_update, hencky_stress, principal_stiffness
from .mohr_coulomb import mohr_coulomb_update
from .norsand import (
    dilatancy_cutoff_psi,
    gas_phase_check,
    initialize_norsand_site,
    norsand_update,
)
from .batch import (
    elastic_update_many,
    material_update_arrays,
    mohr_coulomb_update_many,
    norsand_update_many,
)

__all__ = [
    "ConstitutiveState",
    "ElasticParams",
    "MohrCoulombParams",
    "NorSandParams",
    "MaterialModel",
    "GAS_PHASE_BE",
    "eigendecompose_sym3",
    "log_strain",
    "eig_desc_many",
    "hencky_elastic_update",
    "hencky_stress",
    "principal_stiffness",
    "mohr_coulomb_update",
    "norsand_update",
    "dilatancy_cutoff_psi",
    "gas_phase_check",
    "initialize_norsand_site",
    "elastic_update_many",
    "mohr_coulomb_update_many",
    "norsand_update_many",
    "material_update_arrays",
    "material_stress",
    "material_update",
    "material_tangent",
    "initial_state",
]

_MODEL_NAMES = ("elastic", "mohr_coulomb", "norsand")


@dataclass(frozen=True)
class MaterialModel:
    """A constitutive model name paired with its parameter block."""

    name: str
    params: Any

    def __post_init__(self):
        if self.name not in _MODEL_NAMES:
            raise ValueError(f"unknown material model {self.name!r}")


def material_stress(model, state):
    """Kirchhoff stress of the current state without updating anything."""
    if model.name == "norsand":
        P, lam = eigendecompose_sym3(state.B_e)
        eps = 0.5 * np.log(lam)
        ev_bar = -eps.sum()
        dev = eps - eps.mean()
        dev_norm = float(np.linalg.norm(dev))
        pbar = -state.p0 * math.exp((ev_bar + state.eps_e_v0) / model.params.kappa)
        q = 3.0 * model.params.G_shear * math.sqrt(2.0 / 3.0) * dev_norm
        nhat = dev / dev_norm if dev_norm > 0.0 else np.zeros(3)
        tau_pr = -pbar * np.ones(3) + math.sqrt(2.0 / 3.0) * q * nhat
        return (P * tau_pr) @ P.T
    lam_l, mu = model.params.lame
    return hencky_stress(state.B_e, lam_l, mu)


def material_update(model, state, dF, J_bar=None):
    """Advance one state by one increment; returns ``(tau, new_state)``.

    For Nor-Sand the stabilized Jacobian defaults to the accumulated
    single-element value (v/v0) * det(dF) when none is supplied.
    """
    if model.name == "elastic":
        tau, B_e = hencky_elastic_update(state, dF, state.B_e, model.params)
        return tau, replace(state, B_e=B_e)
    if model.name == "mohr_coulomb":
        tau, B_e, ep = mohr_coulomb_update(state, dF, state.B_e, model.params)
        return tau, replace(state, B_e=B_e, Ep_d_acc=ep)
    if J_bar is None:
        J_bar = (state.v / state.v0) * float(np.linalg.det(dF))
    tau, _, new_state = norsand_update(state, dF, state.B_e, J_bar, model.params)
    return tau, new_state


def material_tangent(model, state, eps=1e-8, signs=(1.0, 1.0, 1.0),
                     base_dF=None):
    """Normal block C[i, j] = d tau_ii / d eps_jj by one-sided differences.

    With ``base_dF`` the probes perturb around that increment, which keeps
    every column on the same (loading) branch of an elastoplastic response;
    without it the probes start from the unperturbed state and ``signs``
    picks the probing direction per axis.  At the q = 0 nose of the
    Nor-Sand surface the elastoplastic tangent is undefined (an isotropic
    probe admits no consistent return), so the elastic moduli are returned
    instead.
    """
    base = np.eye(3) if base_dF is None else np.asarray(base_dF, dtype=float)
    try:
        if base_dF is None:
            tau0 = material_stress(model, state)
        else:
            tau0, _ = material_update(model, state, base)
        C = np.empty((3, 3))
        for j in range(3):
            stretch = np.ones(3)
            stretch[j] += signs[j] * eps
            tau_j, _ = material_update(model, state, base * stretch[None, :])
            # the probe adds ln(1 + s*eps) of logarithmic strain on axis j
            C[:, j] = (np.diagonal(tau_j) - np.diagonal(tau0)) \
                / math.log1p(signs[j] * eps)
        return C
    except RuntimeError:
        return _elastic_tangent(model, state)


def _elastic_tangent(model, state):
    if model.name == "norsand":
        tau0 = material_stress(model, state)
        K = -np.trace(tau0) / 3.0 / model.params.kappa
        mu = model.params.G_shear
    else:
        lam_l, mu = model.params.lame
        K = lam_l + 2.0 * mu / 3.0
    return (K - 2.0 * mu / 3.0) * np.ones((3, 3)) + 2.0 * mu * np.eye(3)


def initial_state(model, p0=0.0, v0=2.0):
    """Isotropically consolidated starting state for drivers and tests.

    For the elastic and Mohr-Coulomb models the elastic tensor is strained
    so the Kirchhoff mean stress equals ``p0`` (tension positive).  For
    Nor-Sand the reference pressure is set to ``p0`` with zero reference
    volumetric strain and the image pressure follows from the OCR.
    """
    if model.name == "norsand":
        p_i = model.params.initial_image_pressure(p0)
        return ConstitutiveState(
            B_e=np.eye(3), p_i=p_i, v=v0, v0=v0, p0=p0, eps_e_v0=0.0)
    lam_l, mu = model.params.lame
    K = lam_l + 2.0 * mu / 3.0
    ev = p0 / K
    B_e = math.exp(2.0 * ev / 3.0) * np.eye(3)
    return ConstitutiveState(B_e=B_e, v=v0, v0=v0)
