"""Hencky hyperelasticity: linear stiffness acting on logarithmic strain."""

import numpy as np

from .invariants import eigendecompose_sym3

__all__ = ["hencky_elastic_update", "hencky_stress", "principal_stiffness"]


def principal_stiffness(lam, mu):
    """3x3 normal block of the isotropic stiffness in principal axes."""
    return lam * np.ones((3, 3)) + 2.0 * mu * np.eye(3)


def hencky_stress(B_e, lam, mu):
    """Kirchhoff stress from an elastic left Cauchy-Green tensor."""
    P, lam_e = eigendecompose_sym3(B_e)
    if lam_e[2] <= 0.0:
        raise ValueError("elastic tensor lost positive definiteness")
    eps = 0.5 * np.log(lam_e)
    tau_pr = lam * eps.sum() + 2.0 * mu * eps
    return (P * tau_pr) @ P.T


def hencky_elastic_update(state, dF, B_e_prev, params):
    """Push the elastic tensor forward and evaluate the Hencky stress.

    Parameters
    ----------
    state : ConstitutiveState
        Unused by the elastic law; kept for a uniform update signature.
    dF : (3, 3) array
        Incremental deformation gradient, det > 0.
    B_e_prev : (3, 3) array
        Previous (possibly patch-averaged) elastic left Cauchy-Green tensor.
    params : ElasticParams

    Returns
    -------
    (tau, B_e_new) : Kirchhoff stress and updated elastic tensor.
    """
    dF = np.asarray(dF, dtype=float)
    if np.linalg.det(dF) <= 0.0:
        raise ValueError("increment inverts the element (det dF <= 0)")
    B_e_new = dF @ np.asarray(B_e_prev, dtype=float) @ dF.T
    lam, mu = params.lame
    tau = hencky_stress(B_e_new, lam, mu)
    return tau, B_e_new
