"""
Goal: Units, physical constants and the protonation convention.

Internal units are kJ/mol, ps, u and K. Lambda is a dimensionless coordinate
of unit scale, so F/m comes out in 1/ps^2 with no conversion factor.
lambda = 0 is the protonated end state, lambda = 1 the deprotonated one.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np
from scipy import constants
from scipy.special import expit

from cphlab.models.errors import InvalidInputError

# Gas constant in kJ/(mol K)
R_KJ = constants.R / 1000.0
LN10 = math.log(10.0)

DEPROT_THRESHOLD = 0.5
LAMBDA_MIN, LAMBDA_MAX = -0.15, 1.15
WALL_LO, WALL_HI = -0.1, 1.1

# DBO proximity regions and the in-transition band
NEAR_PROT, NEAR_DEPROT = 0.2, 0.8


class Protonation(str, Enum):
    PROTONATED = "protonated"
    DEPROTONATED = "deprotonated"


def kt(temperature: float) -> float:
    """Thermal energy R*T in kJ/mol."""
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be > 0 K, got {temperature}")
    return R_KJ * temperature


def beta(temperature: float) -> float:
    return 1.0 / kt(temperature)


def delta_g_chem(pka_ref: float, ph: float, temperature: float = 300.0) -> float:
    """Deprotonation free-energy offset ln10*R*T*(pKa_ref - pH); positive penalizes lambda = 1."""
    return LN10 * kt(temperature) * (pka_ref - ph)


def pka_shift(energy: float, temperature: float = 300.0) -> float:
    """Convert an energy bias on the deprotonated state into pKa units."""
    return energy / (LN10 * kt(temperature))


def classify_frame(lambda_p: float) -> Protonation:
    if not math.isfinite(lambda_p):
        raise InvalidInputError(f"lambda_p must be finite, got {lambda_p}")
    return Protonation.DEPROTONATED if lambda_p >= DEPROT_THRESHOLD else Protonation.PROTONATED


def deprotonated_mask(lambda_p: np.ndarray) -> np.ndarray:
    """Vectorized classify_frame: True where the frame counts as deprotonated."""
    arr = np.asarray(lambda_p, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("lambda_p contains non-finite values")
    return arr >= DEPROT_THRESHOLD


def macro_pka(pka_delta: float, pka_eps: float) -> float:
    """Macroscopic pKa of two parallel tautomer deprotonations."""
    return -math.log10(10.0 ** (-pka_delta) + 10.0 ** (-pka_eps))


def hh_fraction(ph: np.ndarray | float, pka: float, n: float = 1.0) -> np.ndarray:
    """Deprotonated fraction 1/(10^(n(pKa - pH)) + 1), written through expit for stability."""
    return expit(n * LN10 * (np.asarray(ph, dtype=float) - pka))
