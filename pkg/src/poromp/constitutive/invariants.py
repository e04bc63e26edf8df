"""Principal-space utilities shared by the stress update routines."""

import numpy as np

__all__ = ["eigendecompose_sym3", "log_strain", "eig_desc_many"]


def eigendecompose_sym3(B):
    """Eigendecompose a symmetric 3x3 tensor.

    Returns
    -------
    (P, D_hat)
        ``P`` has unit eigenvectors in its columns and ``D_hat`` holds the
        eigenvalues sorted descending, so ``P @ diag(D_hat) @ P.T``
        reconstructs the input.
    """
    B = np.asarray(B, dtype=float)
    if B.shape != (3, 3):
        raise ValueError("expected a 3x3 tensor")
    scale = max(1.0, float(np.abs(B).max()))
    if np.abs(B - B.T).max() > 1e-8 * scale:
        raise ValueError("eigendecompose_sym3 requires a symmetric tensor")
    lam, P = np.linalg.eigh(B)
    return P[:, ::-1].copy(), lam[::-1].copy()


def log_strain(B_e):
    """Logarithmic strain E = 1/2 ln(B_e) of an SPD elastic tensor."""
    P, lam = eigendecompose_sym3(B_e)
    if lam[2] <= 0.0:
        raise ValueError("log_strain requires a positive definite tensor")
    return (P * (0.5 * np.log(lam))) @ P.T


def eig_desc_many(B):
    """Batched descending eigendecomposition of (n, 3, 3) symmetric tensors.

    Returns ``(P, lam)`` with shapes (n, 3, 3) and (n, 3).
    """
    lam, P = np.linalg.eigh(B)
    return P[..., ::-1].copy(), lam[..., ::-1].copy()
