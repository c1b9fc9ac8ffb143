"""
Goal: Partition Function Correction.

Integrate exp(-beta*V) over the protonated and deprotonated halves of lambda
and move the lambda = 1 well until -(1/beta)*ln(Z_deprot/Z_prot) hits the
target free energy. The protonated well stays put as the gauge.

Tautomeric sites get a joint correction: the tautomer offset g is tuned to the
deprotonated delta:eps ratio and the lp well depth to the macroscopic ratio,
alternating until both agree.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.polynomial.legendre import leggauss
from pydantic import BaseModel, ConfigDict

from cphlab.models.errors import InvalidInputError, UnattainableTargetError
from cphlab.models.units import DEPROT_THRESHOLD, LN10, beta as beta_of, delta_g_chem, kt
from cphlab.services.bias import DoubleWellSpline, SitePotential, confining_wall, eval_vdw

Potential = Callable[[np.ndarray], np.ndarray]

GL_ORDER = 8
MIN_PANELS = 64
REL_TOL = 1e-10
MAX_DOUBLINGS = 14
DEPTH_BOUND = 50.0
DEFAULT_TOL = 1e-4

# Site-level correction covers the whole confined range; half of each well's
# mass sits outside [0, 1].
SITE_LO, SITE_HI = -0.3, 1.3
TAUTOMER_PANELS = 16
MAX_TAUTOMER_PANELS = 128
PAIR_PANELS = 32


class PfcResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    adjusted_spline: DoubleWellSpline
    achieved_dg: float
    target_dg: float
    iterations: int


@lru_cache(maxsize=8)
def _gauss(order: int) -> Tuple[np.ndarray, np.ndarray]:
    return leggauss(order)


def _panel_nodes(a: float, b: float, panels: int, order: int = GL_ORDER) -> Tuple[np.ndarray, np.ndarray]:
    x, w = _gauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _intervals(lo: float, hi: float, breakpoints: Sequence[float]) -> list[Tuple[float, float]]:
    cuts = sorted({lo, hi, *[p for p in breakpoints if lo < p < hi]})
    return list(zip(cuts[:-1], cuts[1:]))


def integrate_boltzmann(
    V: Potential,
    beta: float,
    lo: float,
    hi: float,
    breakpoints: Sequence[float] = (),
    min_panels: int = MIN_PANELS,
    rel_tol: float = REL_TOL,
) -> float:
    """Composite Gauss-Legendre of exp(-beta*V) on [lo, hi], panels doubled until converged."""
    if not hi > lo:
        return 0.0
    total = 0.0
    for a, b in _intervals(lo, hi, breakpoints):
        panels = min_panels
        previous: Optional[float] = None
        change = math.inf
        for _ in range(MAX_DOUBLINGS):
            nodes, weights = _panel_nodes(a, b, panels)
            energy = np.asarray(V(nodes), dtype=float)
            if not np.all(np.isfinite(energy)):
                raise InvalidInputError(f"non-finite potential on [{a:.3f}, {b:.3f}]")
            value = float(np.dot(weights, np.exp(-beta * energy)))
            if previous is not None:
                change = abs(value - previous) / max(abs(value), 1e-300)
                if change <= rel_tol:
                    break
            previous = value
            panels *= 2
        else:
            logger.warning(
                "quadrature on [{:.3f}, {:.3f}] not converged after {} doublings (relative change {:.2e})",
                a, b, MAX_DOUBLINGS, change,
            )
        total += value
    return total


def partition_halves(
    V: Potential,
    beta: float,
    lo: float = 0.0,
    hi: float = 1.0,
    breakpoints: Sequence[float] = (),
) -> Tuple[float, float]:
    """(Z_prot over [lo, 0.5], Z_deprot over [0.5, hi])."""
    z_prot = integrate_boltzmann(V, beta, lo, DEPROT_THRESHOLD, breakpoints)
    z_deprot = integrate_boltzmann(V, beta, DEPROT_THRESHOLD, hi, breakpoints)
    return z_prot, z_deprot


def free_energy_from_halves(z_prot: float, z_deprot: float, beta: float) -> float:
    """Deprotonation free energy G_deprot - G_prot."""
    if z_prot <= 0 or z_deprot <= 0:
        raise InvalidInputError("partition function underflow; potential too steep for this temperature")
    return -np.log(z_deprot / z_prot) / beta


def spline_dg(
    spline: DoubleWellSpline,
    beta: float,
    extra: Optional[Potential] = None,
    lo: float = 0.0,
    hi: float = 1.0,
) -> float:
    def V(x: np.ndarray) -> np.ndarray:
        v = eval_vdw(spline, x)[0]
        return v + extra(x) if extra is not None else v

    return float(free_energy_from_halves(*partition_halves(V, beta, lo, hi, spline.breakpoints), beta))


def _bisect(f: Callable[[float], float], lo: float, hi: float, tol: float, what: str) -> Tuple[float, float, int]:
    """Root of an increasing f on [lo, hi]; stops as soon as |f| <= tol."""
    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo <= 0.0 <= f_hi):
        raise UnattainableTargetError(
            f"{what}: target outside the reachable range",
            detail=f"residual spans [{f_lo:.4g}, {f_hi:.4g}] on [{lo}, {hi}]",
        )
    for it in range(1, 201):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if abs(f_mid) <= tol or hi - lo < 1e-13:
            return mid, f_mid, it
        if f_mid < 0.0:
            lo = mid
        else:
            hi = mid
    return mid, f_mid, 200


def apply_pfc(
    spline: DoubleWellSpline,
    target_dg: float,
    beta: float,
    tol: float = DEFAULT_TOL,
    extra: Optional[Potential] = None,
    lo: float = 0.0,
    hi: float = 1.0,
) -> PfcResult:
    def residual(depth: float) -> float:
        return spline_dg(spline.with_depth(depth), beta, extra, lo, hi) - target_dg

    current = residual(spline.well1_depth)
    if abs(current) <= tol:
        return PfcResult(adjusted_spline=spline, achieved_dg=current + target_dg, target_dg=target_dg, iterations=0)
    depth, res, iterations = _bisect(residual, -DEPTH_BOUND, DEPTH_BOUND, tol, "pfc well depth")
    logger.debug("pfc: depth {:.6f} after {} iterations (residual {:.2e})", depth, iterations, res)
    return PfcResult(
        adjusted_spline=spline.with_depth(depth),
        achieved_dg=res + target_dg,
        target_dg=target_dg,
        iterations=iterations,
    )


# -----------------------
# Tautomeric sites (2D)
# -----------------------
class _TautomerQuadrature:
    """Tensor-product nodes over (lp, lt) with the lt integrals cached per g."""

    def __init__(self, site: SitePotential, beta: float, dg_ph: float, panels: int = TAUTOMER_PANELS) -> None:
        self.site = site
        self.beta = beta
        self.dg_ph = dg_ph
        self.panels = panels
        bp = set(site.spline_p.breakpoints) | {DEPROT_THRESHOLD}
        bt = set(site.spline_t_prot.breakpoints) | set(site.spline_t_deprot.breakpoints) | {DEPROT_THRESHOLD}
        self.lp, self.wp = site_nodes(bp, panels)
        self.lt, self.wt = site_nodes(bt, panels)
        a0 = site.spline_t_prot.shape_value(self.lt)[0]
        a1 = site.spline_t_deprot.shape_value(self.lt)[0]
        wall = confining_wall(self.lt, site.spline_t_prot.wall_stiffness)[0]
        self._base = a0 + wall
        self._slope = a1 - a0
        self.deprot = self.lp >= DEPROT_THRESHOLD
        self.delta = self.lt < DEPROT_THRESHOLD
        self._cached_g: Optional[float] = None
        self._i_delta = np.empty(0)
        self._i_eps = np.empty(0)

    def _lt_integrals(self, g: float) -> Tuple[np.ndarray, np.ndarray]:
        if self._cached_g != g:
            energy = self._base[None, :] + self.lp[:, None] * (self._slope[None, :] + g * self.lt[None, :])
            m = np.exp(-self.beta * energy) * self.wt[None, :]
            self._i_delta = m[:, self.delta].sum(axis=1)
            self._i_eps = m[:, ~self.delta].sum(axis=1)
            self._cached_g = g
        return self._i_delta, self._i_eps

    def partition(self, g: float, depth: float) -> Tuple[float, float, float]:
        """(Z_prot, Z_deprot_delta, Z_deprot_eps)."""
        sp = self.site.spline_p.with_depth(depth)
        vp = eval_vdw(sp, self.lp)[0] + self.lp * self.dg_ph
        bp = self.wp * np.exp(-self.beta * vp)
        i_d, i_e = self._lt_integrals(g)
        z_prot = float(np.dot(bp[~self.deprot], (i_d + i_e)[~self.deprot]))
        z_delta = float(np.dot(bp[self.deprot], i_d[self.deprot]))
        z_eps = float(np.dot(bp[self.deprot], i_e[self.deprot]))
        return z_prot, z_delta, z_eps

    def residuals(self, g: float, depth: float, dg_taut: float, dg_macro: float) -> Tuple[float, float]:
        """(tautomer, macroscopic) free-energy residuals at (g, depth)."""
        zp, zd, ze = self.partition(g, depth)
        return (
            float(free_energy_from_halves(zd, ze, self.beta)) - dg_taut,
            float(free_energy_from_halves(zp, zd + ze, self.beta)) - dg_macro,
        )


def site_nodes(breakpoints: Iterable[float], panels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes over the confined range, cut at the breakpoints."""
    parts = [_panel_nodes(a, b, panels) for a, b in _intervals(SITE_LO, SITE_HI, sorted(breakpoints))]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _solve_tautomer(
    quad: _TautomerQuadrature,
    g: float,
    depth: float,
    dg_taut: float,
    dg_macro: float,
    tol: float,
    max_rounds: int,
) -> Tuple[float, float, int]:
    """Alternate g and the lp well depth until both residuals are within tol."""

    def taut_res(gv: float) -> float:
        return quad.residuals(gv, depth, dg_taut, dg_macro)[0]

    def macro_res(dv: float) -> float:
        return quad.residuals(g, dv, dg_taut, dg_macro)[1]

    for rounds in range(1, max_rounds + 1):
        if abs(taut_res(g)) > tol:
            g, _, _ = _bisect(taut_res, g - DEPTH_BOUND, g + DEPTH_BOUND, tol, "tautomer offset")
        if abs(macro_res(depth)) > tol:
            depth, _, _ = _bisect(macro_res, -DEPTH_BOUND, DEPTH_BOUND, tol, "pfc well depth")
        if max(abs(r) for r in quad.residuals(g, depth, dg_taut, dg_macro)) <= tol:
            return g, depth, rounds
    raise UnattainableTargetError(f"tautomer pfc for {quad.site.site_id} did not settle in {max_rounds} rounds")


def tautomer_pfc(
    site: SitePotential,
    pH: float,
    temperature: float,
    tol: float = DEFAULT_TOL,
    max_rounds: int = 60,
) -> SitePotential:
    """
    Joint correction of g and the lp well depth on a tensor-product grid.

    A solution is accepted once a grid with twice the panels agrees with it
    within tol; otherwise it is re-solved on the finer grid, up to
    MAX_TAUTOMER_PANELS.
    """
    if site.pka_delta is None or site.pka_eps is None:
        raise InvalidInputError(f"site {site.site_id} has no tautomers")
    b = beta_of(temperature)
    dg_macro = delta_g_chem(site.pka, pH, temperature) + site.shift
    dg_taut = LN10 * kt(temperature) * (site.pka_eps - site.pka_delta)
    panels = TAUTOMER_PANELS
    quad = _TautomerQuadrature(site, b, dg_macro, panels)
    g, depth, rounds = _solve_tautomer(quad, site.g_taut, site.spline_p.well1_depth, dg_taut, dg_macro, tol, max_rounds)
    while True:
        finer = _TautomerQuadrature(site, b, dg_macro, 2 * panels)
        worst = max(abs(r) for r in finer.residuals(g, depth, dg_taut, dg_macro))
        if worst <= tol:
            break
        if 2 * panels > MAX_TAUTOMER_PANELS:
            logger.warning(
                "tautomer pfc for {}: {} panels still off by {:.2e} kJ/mol on the finer grid",
                site.site_id, panels, worst,
            )
            break
        panels *= 2
        g, depth, rounds = _solve_tautomer(finer, g, depth, dg_taut, dg_macro, tol, max_rounds)
    logger.debug(
        "tautomer pfc for {}: g={:.5f} depth={:.5f} in {} rounds, {} panels", site.site_id, g, depth, rounds, panels
    )
    return site.model_copy(update={"g_taut": g, "spline_p": site.spline_p.with_depth(depth)})


def correct_site(site: SitePotential, pH: float, temperature: float, tol: float = DEFAULT_TOL) -> SitePotential:
    """
    PFC of the site's own landscape VpH + Vdw (+ tautomer term) at this pH.

    The static shift is part of the target, so a site with shift w titrates
    at pKa + w / (ln10 kT) whatever the well widths.
    """
    if site.has_tautomers:
        return tautomer_pfc(site, pH, temperature, tol)
    dg = delta_g_chem(site.pka, pH, temperature) + site.shift
    result = apply_pfc(
        site.spline_p,
        dg,
        beta_of(temperature),
        tol,
        extra=lambda x: x * dg,
        lo=SITE_LO,
        hi=SITE_HI,
    )
    return site.model_copy(update={"spline_p": result.adjusted_spline})


def site_probabilities(
    site: SitePotential,
    pH: float,
    temperature: float,
    extra_shift: float = 0.0,
) -> Tuple[float, float]:
    """
    Quadrature-exact (P_deprot, P_delta among deprotonated) of the site's own
    landscape, with `extra_shift` (kJ/mol) added to the linear term, as a latent
    state or a frozen partner would.
    """
    b = beta_of(temperature)
    dg = delta_g_chem(site.pka, pH, temperature) + site.shift + extra_shift
    if site.has_tautomers:
        zp, zd, ze = _TautomerQuadrature(site, b, dg).partition(site.g_taut, site.spline_p.well1_depth)
        return (zd + ze) / (zp + zd + ze), zd / (zd + ze)

    def V(x: np.ndarray) -> np.ndarray:
        return eval_vdw(site.spline_p, x)[0] + x * dg

    zp, zd = partition_halves(V, b, SITE_LO, SITE_HI, site.spline_p.breakpoints)
    return zd / (zp + zd), 1.0


def pair_probabilities(
    site_a: SitePotential,
    site_b: SitePotential,
    j: float,
    pH: float,
    temperature: float,
    panels: int = PAIR_PANELS,
) -> np.ndarray:
    """
    Quadrature-exact 2x2 table of P(a state, b state), index 1 = deprotonated,
    for two non-tautomeric sites coupled by j * lp_a * lp_b.
    """
    if site_a.has_tautomers or site_b.has_tautomers:
        raise InvalidInputError("pair probabilities cover non-tautomeric sites only")
    b = beta_of(temperature)
    grids = []
    for site in (site_a, site_b):
        x, w = site_nodes(set(site.spline_p.breakpoints) | {DEPROT_THRESHOLD}, panels)
        dg = delta_g_chem(site.pka, pH, temperature) + site.shift
        grids.append((x, w * np.exp(-b * (eval_vdw(site.spline_p, x)[0] + x * dg)), x >= DEPROT_THRESHOLD))
    (xa, wa, da), (xb, wb, db) = grids
    m = wa[:, None] * np.exp(-b * j * np.outer(xa, xb)) * wb[None, :]
    z = np.array([[m[np.ix_(ma, mb)].sum() for mb in (~db, db)] for ma in (~da, da)])
    return z / z.sum()
