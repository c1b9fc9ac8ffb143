"""
Goal: Bias potentials on the lambda coordinates and their analytic gradients.

    V(lp, lt) = Vmm(lp, lt) + VpH(lp) + Vdw(lp) [+ tautomer term in lt]

- Vmm is a dense 2D polynomial from calibration.
- VpH is linear in lp: lp * ln10*RT*(pKa - pH).
- Vdw is a cubic Hermite double well with a quartic wall outside [-0.1, 1.1].
- Tautomeric sites blend a protonated-state and a deprotonated-state well in lt
  by lp, plus an offset g*lp*lt that sets the deprotonated tautomer ratio.

Everything here is a pure function of frozen pydantic parameters.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from numpy.polynomial import polynomial as npoly
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator
from scipy.interpolate import CubicHermiteSpline

from cphlab.models.errors import DomainError
from cphlab.models.schemas import SiteSpec
from cphlab.models.units import LAMBDA_MAX, LAMBDA_MIN, LN10, WALL_HI, WALL_LO, delta_g_chem, kt

ArrayLike = np.ndarray | float
Knot = Tuple[float, float, float]

_DOMAIN_SLACK = 1e-12


# -----------------------
# Calibration polynomial
# -----------------------
class CalibrationPolynomial(BaseModel):
    """c[i][j] * lp^i * lt^j, kJ/mol. Serialized as {degree_p, degree_t, coeffs} (row-major)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    degree_p: int = Field(5, ge=0)
    degree_t: int = Field(5, ge=0)
    coeffs: List[List[float]]

    @field_validator("coeffs")
    @classmethod
    def _finite(cls, v: List[List[float]]) -> List[List[float]]:
        arr = np.asarray(v, dtype=float)
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ValueError("coeffs must be a finite rectangular matrix")
        return v

    @model_validator(mode="after")
    def _shape(self) -> "CalibrationPolynomial":
        if np.asarray(self.coeffs).shape != (self.degree_p + 1, self.degree_t + 1):
            raise ValueError(
                f"coeffs must be {(self.degree_p + 1)}x{(self.degree_t + 1)} for degrees "
                f"({self.degree_p}, {self.degree_t})"
            )
        return self

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "CalibrationPolynomial":
        a = np.asarray(arr, dtype=float)
        return cls(degree_p=a.shape[0] - 1, degree_t=a.shape[1] - 1, coeffs=a.tolist())

    @classmethod
    def zeros(cls, degree_p: int = 5, degree_t: int = 5) -> "CalibrationPolynomial":
        return cls.from_array(np.zeros((degree_p + 1, degree_t + 1)))

    def array(self) -> np.ndarray:
        return np.asarray(self.coeffs, dtype=float)


def _check_domain(name: str, lam: np.ndarray) -> None:
    if np.any(lam < LAMBDA_MIN - _DOMAIN_SLACK) or np.any(lam > LAMBDA_MAX + _DOMAIN_SLACK) or not np.all(
        np.isfinite(lam)
    ):
        raise DomainError(f"{name} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")


def poly_value(coeffs: np.ndarray, lambda_p: ArrayLike, lambda_t: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unchecked 2D polynomial value and partials."""
    lp = np.asarray(lambda_p, dtype=float)
    lt = np.asarray(lambda_t, dtype=float)
    v = npoly.polyval2d(lp, lt, coeffs)
    gp = npoly.polyval2d(lp, lt, npoly.polyder(coeffs, axis=0)) if coeffs.shape[0] > 1 else np.zeros_like(v)
    gt = npoly.polyval2d(lp, lt, npoly.polyder(coeffs, axis=1)) if coeffs.shape[1] > 1 else np.zeros_like(v)
    return v, gp, gt


def eval_vmm(poly: CalibrationPolynomial, lambda_p: ArrayLike, lambda_t: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    lp = np.asarray(lambda_p, dtype=float)
    lt = np.asarray(lambda_t, dtype=float)
    _check_domain("lambda_p", lp)
    _check_domain("lambda_t", lt)
    return poly_value(poly.array(), lp, lt)


# -----------------------
# pH offset
# -----------------------
class PhOffset(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pka_ref: float
    pH: float
    temperature: float = Field(300.0, gt=0)

    @property
    def delta_g(self) -> float:
        return delta_g_chem(self.pka_ref, self.pH, self.temperature)


def eval_vph(off: PhOffset, lambda_p: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    lp = np.asarray(lambda_p, dtype=float)
    dg = off.delta_g
    return lp * dg, np.full_like(lp, dg)


# -----------------------
# Double well
# -----------------------
def confining_wall(lam: ArrayLike, stiffness: float) -> Tuple[np.ndarray, np.ndarray]:
    """Quartic wall k*d^4 beyond [-0.1, 1.1]; zero inside."""
    x = np.asarray(lam, dtype=float)
    over = np.maximum(x - WALL_HI, 0.0)
    under = np.maximum(WALL_LO - x, 0.0)
    v = stiffness * (over**4 + under**4)
    g = 4.0 * stiffness * (over**3 - under**3)
    return v, g


class DoubleWellSpline(BaseModel):
    """
    Hermite double well on the knot set
    {-0.15 anchor, well0_center, 0.5 apex, well1_center, 1.15 anchor}
    with zero slope at the wells and the apex. Anchor slopes make the outer
    segments exact parabolas rising `wall_height` above each well.
    """

    model_config = ConfigDict(frozen=True, extra="ignore")

    well0_center: float = 0.0
    well1_center: float = 1.0
    well0_depth: float = 0.0
    well1_depth: float = 0.0
    barrier_height: float = Field(6.0, ge=0)
    wall_height: float = Field(30.0, gt=0)
    wall_stiffness: float = Field(1.0e6, ge=0)

    @model_validator(mode="after")
    def _ordered(self) -> "DoubleWellSpline":
        if not (LAMBDA_MIN < self.well0_center < 0.5 < self.well1_center < LAMBDA_MAX):
            raise ValueError("need -0.15 < well0_center < 0.5 < well1_center < 1.15")
        return self

    @computed_field  # type: ignore[prop-decorator]
    @property
    def knots(self) -> List[Knot]:
        c0, c1 = self.well0_center, self.well1_center
        d0, d1 = self.well0_depth, self.well1_depth
        a = self.wall_height
        apex = 0.5 * (d0 + d1) + self.barrier_height
        return [
            (LAMBDA_MIN, d0 + a, -2.0 * a / (c0 - LAMBDA_MIN)),
            (c0, d0, 0.0),
            (0.5, apex, 0.0),
            (c1, d1, 0.0),
            (LAMBDA_MAX, d1 + a, 2.0 * a / (LAMBDA_MAX - c1)),
        ]

    @property
    def breakpoints(self) -> Tuple[float, ...]:
        return tuple(sorted({k[0] for k in self.knots} | {WALL_LO, WALL_HI}))

    def hermite(self) -> CubicHermiteSpline:
        x, y, s = (np.array(col, dtype=float) for col in zip(*self.knots))
        return CubicHermiteSpline(x, y, s)

    def segments(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(knot x, per-segment cubic coeffs highest power first, end value/slope pairs) for the kernel."""
        x, y, s = (np.array(col, dtype=float) for col in zip(*self.knots))
        coeffs = np.ascontiguousarray(self.hermite().c.T)
        ends = np.array([y[0], s[0], y[-1], s[-1]])
        return x, coeffs, ends

    def shape_value(self, lam: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
        """Spline part only: Hermite inside the knot span, linear continuation outside."""
        x, y, s = (np.array(col, dtype=float) for col in zip(*self.knots))
        lam_a = np.asarray(lam, dtype=float)
        sp = self.hermite()
        inside = np.clip(lam_a, x[0], x[-1])
        v = np.asarray(sp(inside), dtype=float)
        g = np.asarray(sp(inside, 1), dtype=float)
        lo = lam_a < x[0]
        hi = lam_a > x[-1]
        v = np.where(lo, y[0] + s[0] * (lam_a - x[0]), v)
        g = np.where(lo, s[0], g)
        v = np.where(hi, y[-1] + s[-1] * (lam_a - x[-1]), v)
        g = np.where(hi, s[-1], g)
        return v, g

    def with_barrier(self, height: float) -> "DoubleWellSpline":
        return self.model_copy(update={"barrier_height": float(height)})

    def with_depth(self, well1_depth: float) -> "DoubleWellSpline":
        return self.model_copy(update={"well1_depth": float(well1_depth)})

    def with_centers(self, well0_center: float, well1_center: float) -> "DoubleWellSpline":
        return DoubleWellSpline.model_validate(
            {**self.model_dump(exclude={"knots"}), "well0_center": well0_center, "well1_center": well1_center}
        )


def eval_vdw(sp: DoubleWellSpline, lam: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    v, g = sp.shape_value(lam)
    wv, wg = confining_wall(lam, sp.wall_stiffness)
    return v + wv, g + wg


# -----------------------
# Per-site bias
# -----------------------
class SitePotential(BaseModel):
    """Everything that shapes one site's bias. DBO and PFC produce new copies."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    site_id: str
    pka: float
    pka_delta: Optional[float] = None
    pka_eps: Optional[float] = None
    vmm: Optional[CalibrationPolynomial] = None
    reference: Optional[CalibrationPolynomial] = None
    spline_p: DoubleWellSpline = Field(default_factory=DoubleWellSpline)
    spline_t_prot: DoubleWellSpline = Field(default_factory=DoubleWellSpline)
    spline_t_deprot: DoubleWellSpline = Field(default_factory=DoubleWellSpline)
    g_taut: float = 0.0
    shift: float = 0.0  # static environment offset on the deprotonated state, kJ/mol

    @property
    def has_tautomers(self) -> bool:
        return self.pka_delta is not None and self.pka_eps is not None

    @classmethod
    def from_spec(
        cls,
        spec: SiteSpec,
        vmm: Optional[CalibrationPolynomial] = None,
        temperature: float = 300.0,
    ) -> "SitePotential":
        well = DoubleWellSpline(
            barrier_height=spec.barrier,
            wall_height=spec.wall_height,
            wall_stiffness=spec.wall_stiffness,
        )
        t_well = well.with_barrier(spec.barrier_t)
        g = 0.0
        if spec.pka_delta is not None and spec.pka_eps is not None:
            g = LN10 * kt(temperature) * (spec.pka_eps - spec.pka_delta)
        reference = CalibrationPolynomial.from_array(np.asarray(spec.reference)) if spec.reference else None
        return cls(
            site_id=spec.id,
            pka=spec.pka,
            pka_delta=spec.pka_delta,
            pka_eps=spec.pka_eps,
            vmm=vmm,
            reference=reference,
            spline_p=well,
            spline_t_prot=t_well,
            spline_t_deprot=t_well,
            g_taut=g,
            shift=spec.shift,
        )


def eval_tautomer(site: SitePotential, lambda_p: ArrayLike, lambda_t: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(1-lp)*Vt_prot(lt) + lp*Vt_deprot(lt) + g*lp*lt, one wall in lt; blended in lp, not switched at 0.5."""
    lp = np.asarray(lambda_p, dtype=float)
    lt = np.asarray(lambda_t, dtype=float)
    a0, da0 = site.spline_t_prot.shape_value(lt)
    a1, da1 = site.spline_t_deprot.shape_value(lt)
    wv, wg = confining_wall(lt, site.spline_t_prot.wall_stiffness)
    g = site.g_taut
    v = (1.0 - lp) * a0 + lp * a1 + g * lp * lt + wv
    gp = a1 - a0 + g * lt
    gt = (1.0 - lp) * da0 + lp * da1 + g * lp + wg
    return v, gp, gt


def eval_total_bias(
    site: SitePotential,
    pH: float,
    lambda_p: ArrayLike,
    lambda_t: ArrayLike = 0.0,
    temperature: float = 300.0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vmm + VpH + Vdw(lp) (+ tautomer term). Non-tautomeric sites ignore lt except through Vmm."""
    lp, lt = np.broadcast_arrays(np.asarray(lambda_p, dtype=float), np.asarray(lambda_t, dtype=float))
    e = np.zeros(lp.shape)
    gp = np.zeros_like(e)
    gt = np.zeros_like(e)
    if site.vmm is not None:
        v, a, b = eval_vmm(site.vmm, lp, lt)
        e, gp, gt = e + v, gp + a, gt + b
    v, a = eval_vph(PhOffset(pka_ref=site.pka, pH=pH, temperature=temperature), lp)
    e, gp = e + v, gp + a
    v, a = eval_vdw(site.spline_p, lp)
    e, gp = e + v, gp + a
    if site.has_tautomers:
        v, a, b = eval_tautomer(site, lp, lt)
        e, gp, gt = e + v, gp + a, gt + b
    return e, gp, gt
