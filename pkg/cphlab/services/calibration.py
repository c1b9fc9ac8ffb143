"""
Goal: Thermodynamic-integration style calibration on a synthetic reference compound.

1) sample_ti_grid: noisy <dU/dlambda> on the 14 x 14 (lp, lt) grid.
2) fit_calibration_poly: one 2D polynomial whose partials match both derivative
   blocks in least squares; constant term pinned to 0. Vmm is the negated fit,
   so Vmm + U_ref is flat when the reference lies in the polynomial class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from cphlab.models.errors import InsufficientDataError, InvalidInputError, SingularFitError
from cphlab.models.schemas import CalibrationSpec
from cphlab.services.bias import CalibrationPolynomial, poly_value

GRID_LAMBDAS: Tuple[float, ...] = (
    -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95, 1.0, 1.05, 1.1,
)


class ReferenceModel(BaseModel):
    """Closed-form U_ref(lp, lt) = sum c[i][j] lp^i lt^j with Gaussian sampling noise."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    coeffs: List[List[float]]
    sigma: float = Field(0.0, ge=0)

    @classmethod
    def from_spec(cls, spec: CalibrationSpec) -> "ReferenceModel":
        return cls(coeffs=spec.reference, sigma=spec.sigma)

    def array(self) -> np.ndarray:
        return np.asarray(self.coeffs, dtype=float)

    def value(self, lambda_p: np.ndarray | float, lambda_t: np.ndarray | float) -> np.ndarray:
        return poly_value(self.array(), lambda_p, lambda_t)[0]

    def partials(self, lambda_p: np.ndarray | float, lambda_t: np.ndarray | float) -> Tuple[np.ndarray, np.ndarray]:
        _, gp, gt = poly_value(self.array(), lambda_p, lambda_t)
        return gp, gt


@dataclass(frozen=True)
class CalibrationGrid:
    lambda_values: np.ndarray
    samples_per_point: int
    mean_dp: np.ndarray  # [i_p, i_t]
    se_dp: np.ndarray
    mean_dt: np.ndarray
    se_dt: np.ndarray

    @property
    def n_points(self) -> int:
        return int(self.mean_dp.size)

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.lambda_values, self.lambda_values, indexing="ij")


@dataclass(frozen=True)
class CalibrationFit:
    polynomial: CalibrationPolynomial  # Vmm = -fitted free energy
    stderr: np.ndarray  # same shape as the coefficient matrix, 0 at the pinned constant
    rms_residual: float


def sample_ti_grid(
    model: ReferenceModel,
    n_samples: int,
    seed: int,
    lambda_values: Sequence[float] = GRID_LAMBDAS,
) -> CalibrationGrid:
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    lam = np.asarray(lambda_values, dtype=float)
    lp, lt = np.meshgrid(lam, lam, indexing="ij")
    dp, dt = model.partials(lp, lt)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    if model.sigma > 0:
        # mean of n N(0, s^2) draws is one N(0, s^2 / n) draw
        noise = rng.standard_normal((2,) + lp.shape) * model.sigma / np.sqrt(n_samples)
        mean_dp, mean_dt = dp + noise[0], dt + noise[1]
    else:
        mean_dp, mean_dt = dp.copy(), dt.copy()
    se = np.full(lp.shape, model.sigma / np.sqrt(n_samples))
    return CalibrationGrid(lam, n_samples, mean_dp, se, mean_dt, se.copy())


def _design(lp: np.ndarray, lt: np.ndarray, degree: int) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Stacked rows [d/dlp ; d/dlt] for every monomial except the constant."""
    terms = [(i, j) for i in range(degree + 1) for j in range(degree + 1) if (i, j) != (0, 0)]
    x, y = lp.ravel(), lt.ravel()
    a_p = np.empty((x.size, len(terms)))
    a_t = np.empty((x.size, len(terms)))
    for col, (i, j) in enumerate(terms):
        a_p[:, col] = i * x ** max(i - 1, 0) * y**j if i else 0.0
        a_t[:, col] = j * x**i * y ** max(j - 1, 0) if j else 0.0
    return np.vstack([a_p, a_t]), terms


def fit_calibration(grids: CalibrationGrid | Sequence[CalibrationGrid], degree: int = 5) -> CalibrationFit:
    """Joint derivative fit over one or several independent grids."""
    grid_list = [grids] if isinstance(grids, CalibrationGrid) else list(grids)
    if not grid_list:
        raise InsufficientDataError("no calibration grids given")
    blocks, rhs, sd = [], [], []
    terms: List[Tuple[int, int]] = []
    for g in grid_list:
        lp, lt = g.mesh()
        a, terms = _design(lp, lt, degree)
        blocks.append(a)
        rhs.append(np.concatenate([g.mean_dp.ravel(), g.mean_dt.ravel()]))
        sd.append(np.concatenate([g.se_dp.ravel(), g.se_dt.ravel()]))
    a = np.vstack(blocks)
    b = np.concatenate(rhs)
    s = np.concatenate(sd)
    rank = np.linalg.matrix_rank(a)
    if rank < a.shape[1]:
        raise SingularFitError(f"calibration design has rank {rank} < {a.shape[1]} unknowns")
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = a @ sol - b

    # Sandwich covariance with the known per-point standard errors
    ata_inv = np.linalg.inv(a.T @ a)
    cov = ata_inv @ (a.T * s**2) @ a @ ata_inv
    se_vec = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    free_energy = np.zeros((degree + 1, degree + 1))
    stderr = np.zeros_like(free_energy)
    for (i, j), c, e in zip(terms, sol, se_vec):
        free_energy[i, j] = c
        stderr[i, j] = e
    rms = float(np.sqrt(np.mean(resid**2)))
    logger.debug("calibration fit: degree {} over {} grids, rms residual {:.3e}", degree, len(grid_list), rms)
    return CalibrationFit(CalibrationPolynomial.from_array(-free_energy), stderr, rms)


def fit_calibration_poly(grids: CalibrationGrid | Sequence[CalibrationGrid], degree: int = 5) -> CalibrationPolynomial:
    return fit_calibration(grids, degree).polynomial


def replica_agreement(fits: Sequence[CalibrationFit]) -> float:
    """Largest pairwise |c_a - c_b| / sqrt(se_a^2 + se_b^2) over coefficients (0 when all exact)."""
    worst = 0.0
    for k, fa in enumerate(fits):
        for fb in fits[k + 1 :]:
            diff = np.abs(fa.polynomial.array() - fb.polynomial.array())
            joint = np.sqrt(fa.stderr**2 + fb.stderr**2)
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(joint > 0, diff / joint, np.where(diff > 0, np.inf, 0.0))
            worst = max(worst, float(np.max(z)))
    return worst


def calibrate(spec: CalibrationSpec) -> Tuple[CalibrationFit, List[CalibrationFit]]:
    """Per-replica fits plus the joint fit over all replicas."""
    model = ReferenceModel.from_spec(spec)
    grids = [sample_ti_grid(model, spec.n_samples, seed=spec.seed + r) for r in range(spec.replicas)]
    per_replica = [fit_calibration(g, spec.degree) for g in grids]
    joint = fit_calibration(grids, spec.degree)
    logger.info(
        "calibrated degree {} polynomial from {} replica(s), rms {:.3e}",
        spec.degree,
        spec.replicas,
        joint.rms_residual,
    )
    return joint, per_replica
