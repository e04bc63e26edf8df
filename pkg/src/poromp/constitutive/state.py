"""Per-point constitutive state and parameter blocks."""

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ConstitutiveState",
    "ElasticParams",
    "MohrCoulombParams",
    "NorSandParams",
    "GAS_PHASE_BE",
]

#: Elastic tensor assigned to a gas-phase point: distinct diagonal entries
#: keep the eigendecomposition well posed while the strain stays ~ 1e-9.
GAS_PHASE_BE = np.diag([1.0 + 1e-9, 1.0 + 2e-9, 1.0 + 3e-9])


def _identity3():
    return np.eye(3)


@dataclass(frozen=True)
class ConstitutiveState:
    """State carried by one material point between stress updates.

    ``p_i``, ``p0`` follow the tension-positive convention, so both are
    negative under compression.  ``v``/``v0`` are specific volumes and only
    meaningful for the critical-state model; the defaults keep the block
    valid for the elastic and Mohr-Coulomb materials that ignore them.
    """

    B_e: np.ndarray = field(default_factory=_identity3)
    Ep_d_acc: float = 0.0
    p_i: float = 0.0
    v: float = 2.0
    v0: float = 2.0
    p0: float = -2000.0
    eps_e_v0: float = 0.0

    def __post_init__(self):
        B = np.asarray(self.B_e, dtype=float)
        object.__setattr__(self, "B_e", B)
        if B.shape != (3, 3) or np.abs(B - B.T).max() > 1e-8 * max(1.0, np.abs(B).max()):
            raise ValueError("B_e must be a symmetric 3x3 tensor")
        if self.Ep_d_acc < 0.0:
            raise ValueError("accumulated plastic strain cannot be negative")
        if self.v <= 1.0 or self.v0 <= 1.0:
            raise ValueError("specific volume must exceed one")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class ElasticParams:
    """Linear (Hencky) elasticity constants."""

    E: float
    nu: float

    def __post_init__(self):
        if self.E <= 0.0 or not -1.0 < self.nu < 0.5:
            raise ValueError("need E > 0 and -1 < nu < 0.5")

    @property
    def lame(self):
        lam = self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))
        mu = 0.5 * self.E / (1.0 + self.nu)
        return lam, mu


@dataclass(frozen=True)
class MohrCoulombParams:
    """Mohr-Coulomb constants; angles in radians.

    The strength reduction factor divides the cohesion and the friction
    tangent, c_f = c/SRF and tan(phi_f) = tan(phi)/SRF.
    """

    E: float
    nu: float
    c: float
    phi: float
    psi_dil: float = 0.0
    SRF: float = 1.0

    def __post_init__(self):
        if self.E <= 0.0 or not -1.0 < self.nu < 0.5:
            raise ValueError("need E > 0 and -1 < nu < 0.5")
        if self.c < 0.0 or not 0.0 <= self.phi < np.pi / 2.0:
            raise ValueError("need c >= 0 and 0 <= phi < pi/2")
        if self.SRF < 1.0:
            raise ValueError("strength reduction factor must be >= 1")

    @property
    def lame(self):
        lam = self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))
        mu = 0.5 * self.E / (1.0 + self.nu)
        return lam, mu

    @property
    def reduced(self):
        """(c_f, phi_f) after strength reduction."""
        return self.c / self.SRF, np.arctan(np.tan(self.phi) / self.SRF)


@dataclass(frozen=True)
class NorSandParams:
    """Critical-state sand model constants.

    ``lambda_c`` multiplies the natural log of the image pressure magnitude
    in Pa when the state parameter is evaluated.
    """

    G_shear: float
    kappa: float
    v_c0: float
    lambda_c: float
    M_cs: float
    N_yield: float
    N_bar: float
    h_hard: float
    alpha_dil: float
    OCR: float = 1.0
    Ep_d_start: float = 1.0
    Ep_d_end: float = 1.5
    v_crit_factor: float = 1.6

    def __post_init__(self):
        if min(self.G_shear, self.kappa, self.lambda_c, self.M_cs, self.h_hard) <= 0.0:
            raise ValueError("moduli and critical-state constants must be positive")
        if not 0.0 <= self.N_yield < 1.0 or not 0.0 <= self.N_bar < 1.0:
            raise ValueError("yield/potential constants must lie in [0, 1)")
        if self.Ep_d_start >= self.Ep_d_end:
            raise ValueError("Ep_d_start must be below Ep_d_end")
        if self.v_crit_factor <= 1.0:
            raise ValueError("v_crit_factor must exceed one")
        if self.OCR < 1.0:
            raise ValueError("OCR must be >= 1")

    def initial_image_pressure(self, p0):
        """Image pressure for a reference pressure p0 < 0 (tension positive)."""
        if p0 >= 0.0:
            raise ValueError("reference pressure must be compressive (p0 < 0)")
        N = self.N_yield
        if N == 0.0:
            return self.OCR * p0 / np.e
        return self.OCR * p0 * (1.0 - N) ** ((1.0 - N) / N)
