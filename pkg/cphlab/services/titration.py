"""
Goal: Titration curves from lambda trajectories.

Fractions are counted on uncensored frames (lambda_p >= 0.5 is deprotonated),
collected per (site, pH, replica) into a pandas table, and fitted with
Henderson-Hasselbalch or Hill curves by Levenberg-Marquardt. Confidence
intervals come from resampling replica fractions within each pH.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.optimize import least_squares

from cphlab.models.errors import (
    CphError,
    EmptyDataError,
    FitError,
    InsufficientDataError,
    InvalidInputError,
    UnidentifiableFitError,
)
from cphlab.models.schemas import FitSummary
from cphlab.models.units import LN10, NEAR_DEPROT, NEAR_PROT, deprotonated_mask, hh_fraction
from cphlab.services.dynamics import LambdaTrajectory

FitKind = Literal["hh", "hill"]

GRAD_TOL = 1e-8
LM_TOL = 1e-14
UNSTABLE_FAILURES = 0.10
SPREAD_THRESHOLD = 0.2

DATASET_COLUMNS = [
    "site",
    "pH",
    "replica",
    "n_frames",
    "n_deprot",
    "n_censored",
    "n_prot",
    "n_deprot_t0",
    "n_deprot_t1",
    "n_transitions",
    "n_in_transition",
    "duration_ps",
    "fraction",
]


# -----------------------
# Per-trajectory counts
# -----------------------
def deprotonation_fraction(lambda_p: Sequence[float], censored: Optional[Sequence[bool]] = None) -> float:
    lp = np.asarray(lambda_p, dtype=float)
    keep = ~np.asarray(censored, dtype=bool) if censored is not None else np.ones(lp.shape, dtype=bool)
    if keep.shape != lp.shape:
        raise InvalidInputError("censored flags must match the frames")
    lp = lp[keep]
    if lp.size == 0:
        raise EmptyDataError("no uncensored frames")
    return float(np.count_nonzero(deprotonated_mask(lp)) / lp.size)


def count_transitions(lambda_p: Sequence[float], low: float = NEAR_PROT, high: float = NEAR_DEPROT) -> int:
    """Crossings between the two proximity regions (lambda < low, lambda > high), with hysteresis."""
    lp = np.asarray(lambda_p, dtype=float)
    region = np.where(lp < low, 0, np.where(lp > high, 1, -1))
    visited = region[region >= 0]
    if visited.size < 2:
        return 0
    return int(np.count_nonzero(np.diff(visited)))


def in_transition_count(lambda_p: Sequence[float], low: float = NEAR_PROT, high: float = NEAR_DEPROT) -> int:
    lp = np.asarray(lambda_p, dtype=float)
    return int(np.count_nonzero((lp > low) & (lp < high)))


def cell_counts(traj: LambdaTrajectory, site: str, stride_ps: float) -> Dict[str, float]:
    """One dataset row (without site/pH/replica) for a site of a trajectory."""
    i = traj.site_index(site)
    keep = ~traj.censored[:, i]
    lp = traj.lambda_p[keep, i]
    lt = traj.lambda_t[keep, i]
    n = int(lp.size)
    deprot = deprotonated_mask(lp)
    n_deprot = int(np.count_nonzero(deprot))
    t0 = int(np.count_nonzero(deprot & (lt < 0.5)))
    return {
        "n_frames": n,
        "n_deprot": n_deprot,
        "n_censored": int(traj.n_frames - n),
        "n_prot": n - n_deprot,
        "n_deprot_t0": t0,
        "n_deprot_t1": n_deprot - t0,
        "n_transitions": count_transitions(lp),
        "n_in_transition": in_transition_count(lp),
        "duration_ps": n * stride_ps,
        "fraction": n_deprot / n if n else float("nan"),
    }


@dataclass
class TitrationDataset:
    """Per (site, pH, replica) counts; one row per cell and site."""

    table: pd.DataFrame

    @classmethod
    def from_trajectories(cls, trajs: Iterable[LambdaTrajectory], stride_ps: float) -> "TitrationDataset":
        rows = []
        for traj in trajs:
            for site in traj.site_ids:
                rows.append({"site": site, "pH": traj.pH, "replica": traj.replica, **cell_counts(traj, site, stride_ps)})
        return cls.from_rows(rows)

    @classmethod
    def from_rows(cls, rows: Iterable[Dict[str, object]]) -> "TitrationDataset":
        table = pd.DataFrame(list(rows), columns=DATASET_COLUMNS)
        table = table.sort_values(["site", "pH", "replica"], kind="mergesort").reset_index(drop=True)
        return cls(table)

    @property
    def sites(self) -> List[str]:
        return list(dict.fromkeys(self.table["site"]))

    @property
    def ph_grid(self) -> List[float]:
        return sorted(set(float(x) for x in self.table["pH"]))

    def usable(self, site: str) -> pd.DataFrame:
        """Rows of a site with at least one uncensored frame."""
        t = self.table[(self.table["site"] == site) & (self.table["n_frames"] > 0)]
        if t.empty:
            raise EmptyDataError(f"site {site}: no uncensored frames in any cell")
        return t

    def points(self, site: str) -> pd.DataFrame:
        return self.usable(site)[["pH", "replica", "fraction"]].reset_index(drop=True)


# -----------------------
# Fits
# -----------------------
@dataclass(frozen=True)
class FitResult:
    pKa: float
    hill_n: float
    sse: float
    converged: bool
    grad_norm: float = 0.0

    def summary(self) -> FitSummary:
        return FitSummary(pKa=self.pKa, hill_n=self.hill_n, sse=self.sse, converged=self.converged)


def _fit(ph: Sequence[float], x: Sequence[float], hill: bool) -> FitResult:
    ph_arr = np.asarray(ph, dtype=float)
    x_arr = np.asarray(x, dtype=float)
    if ph_arr.shape != x_arr.shape or ph_arr.ndim != 1:
        raise InvalidInputError("pH and fraction arrays must be 1-D and equally long")
    if not (np.all(np.isfinite(ph_arr)) and np.all(np.isfinite(x_arr))):
        raise InvalidInputError("fit points must be finite")
    need = 3 if hill else 2
    if np.unique(ph_arr).size < need:
        raise InvalidInputError(f"need at least {need} distinct pH values")
    if np.ptp(x_arr) == 0.0:
        raise UnidentifiableFitError(f"all fractions equal {x_arr[0]:g}; pKa is not identifiable")

    pka0 = float(ph_arr[np.argmin(np.abs(x_arr - 0.5))])

    def curve(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n = p[1] if hill else 1.0
        f = hh_fraction(ph_arr, p[0], n)
        return f, f * (1.0 - f)

    def residuals(p: np.ndarray) -> np.ndarray:
        return curve(p)[0] - x_arr

    def jac(p: np.ndarray) -> np.ndarray:
        n = p[1] if hill else 1.0
        _, s = curve(p)
        cols = [-n * LN10 * s]
        if hill:
            cols.append(LN10 * (ph_arr - p[0]) * s)
        return np.stack(cols, axis=1)

    p0 = np.array([pka0, 1.0] if hill else [pka0])
    try:
        res = least_squares(residuals, p0, jac=jac, method="lm", xtol=LM_TOL, ftol=LM_TOL, gtol=LM_TOL)
    except (ValueError, FloatingPointError) as e:
        raise FitError(str(e), diagnostics={"p0": p0.tolist()}) from e
    if not np.all(np.isfinite(res.x)):
        raise FitError("fit diverged", diagnostics={"p0": p0.tolist(), "status": int(res.status)})
    grad = float(np.linalg.norm(res.grad))
    r = residuals(res.x)
    return FitResult(
        pKa=float(res.x[0]),
        hill_n=float(res.x[1]) if hill else 1.0,
        sse=float(r @ r),
        converged=bool(res.success) and grad < GRAD_TOL,
        grad_norm=grad,
    )


def fit_hh(ph: Sequence[float], x: Sequence[float]) -> FitResult:
    return _fit(ph, x, hill=False)


def fit_hill(ph: Sequence[float], x: Sequence[float]) -> FitResult:
    return _fit(ph, x, hill=True)


def fit_points(points: pd.DataFrame, fit_kind: FitKind = "hh") -> FitResult:
    fn = fit_hill if fit_kind == "hill" else fit_hh
    return fn(points["pH"].to_numpy(), points["fraction"].to_numpy())


def micro_points(dataset: TitrationDataset, site: str) -> pd.DataFrame:
    """Per (pH, replica): x_delta = D_t0/(P + D_t0) and x_eps = D_t1/(P + D_t1)."""
    t = dataset.usable(site)
    prot = t["n_prot"].to_numpy(dtype=float)
    out = t[["pH", "replica"]].copy()
    for col, name in (("n_deprot_t0", "x_delta"), ("n_deprot_t1", "x_eps")):
        num = t[col].to_numpy(dtype=float)
        den = prot + num
        with np.errstate(invalid="ignore", divide="ignore"):
            out[name] = np.where(den > 0, num / den, np.nan)
    return out.reset_index(drop=True)


def micro_pkas(dataset: TitrationDataset, site: str) -> Tuple[FitResult, FitResult]:
    pts = micro_points(dataset, site)
    if int(dataset.usable(site)[["n_deprot_t0", "n_deprot_t1"]].to_numpy().sum()) == 0:
        raise UnidentifiableFitError(f"site {site}: no deprotonated frames in either tautomer")
    fits = []
    for col in ("x_delta", "x_eps"):
        ok = pts[col].notna()
        fits.append(fit_hh(pts.loc[ok, "pH"], pts.loc[ok, col]))
    return fits[0], fits[1]


# -----------------------
# Bootstrap
# -----------------------
@dataclass(frozen=True)
class BootstrapResult:
    estimate: float
    ci_lo: float
    ci_hi: float
    n_boot: int
    n_failed: int
    unstable: bool
    hill_n: float = 1.0
    n_ci_lo: Optional[float] = None
    n_ci_hi: Optional[float] = None

    @property
    def width(self) -> float:
        return self.ci_hi - self.ci_lo

    def summary(self, fit: FitResult) -> FitSummary:
        return FitSummary(
            pKa=fit.pKa,
            hill_n=fit.hill_n,
            sse=fit.sse,
            converged=fit.converged,
            ci_lo=self.ci_lo,
            ci_hi=self.ci_hi,
            n_ci_lo=self.n_ci_lo,
            n_ci_hi=self.n_ci_hi,
            bootstrap_failures=self.n_failed,
            unstable=self.unstable,
        )


def bootstrap_ci(
    points: pd.DataFrame,
    fit_kind: FitKind = "hh",
    n_boot: int = 5000,
    seed: int = 0,
    level: float = 0.95,
) -> BootstrapResult:
    """Resample replica fractions with replacement within each pH and refit; percentile CI."""
    if n_boot < 1:
        raise InvalidInputError("n_boot must be >= 1")
    groups = [g["fraction"].to_numpy(dtype=float) for _, g in points.groupby("pH", sort=True)]
    phs = [float(p) for p, _ in points.groupby("pH", sort=True)]
    if any(g.size < 2 for g in groups):
        raise InsufficientDataError("bootstrap needs at least 2 replicas at every pH")
    full = fit_points(points, fit_kind)
    ph_col = np.concatenate([np.full(g.size, p) for p, g in zip(phs, groups)])

    pkas: List[float] = []
    ns: List[float] = []
    failed = 0
    for it in range(n_boot):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, it])))
        x = np.concatenate([g[rng.integers(0, g.size, g.size)] for g in groups])
        try:
            fit = (fit_hill if fit_kind == "hill" else fit_hh)(ph_col, x)
        except CphError:
            failed += 1
            continue
        if not np.isfinite(fit.pKa):
            failed += 1
            continue
        pkas.append(fit.pKa)
        ns.append(fit.hill_n)
    if not pkas:
        raise FitError("every bootstrap refit failed", diagnostics={"n_boot": n_boot})
    unstable = failed > UNSTABLE_FAILURES * n_boot
    if unstable:
        logger.warning("bootstrap: {}/{} refits failed, CI flagged unstable", failed, n_boot)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(pkas, [tail, 100.0 - tail])
    n_lo = n_hi = None
    if fit_kind == "hill":
        n_lo, n_hi = (float(v) for v in np.percentile(ns, [tail, 100.0 - tail]))
    return BootstrapResult(
        estimate=full.pKa,
        ci_lo=float(lo),
        ci_hi=float(hi),
        n_boot=n_boot,
        n_failed=failed,
        unstable=unstable,
        hill_n=full.hill_n,
        n_ci_lo=n_lo,
        n_ci_hi=n_hi,
    )


# -----------------------
# Replica spread and convergence
# -----------------------
def replica_spread(points: pd.DataFrame) -> pd.Series:
    """Inter-replica standard deviation of the fraction, per pH."""
    return points.groupby("pH", sort=True)["fraction"].std(ddof=1).fillna(0.0)


def is_spread_replica(points: pd.DataFrame, threshold: float = SPREAD_THRESHOLD) -> Tuple[float, bool]:
    sd = replica_spread(points)
    worst = float(sd.max()) if len(sd) else 0.0
    return worst, worst > threshold


def ci_width_curve(
    trajs: Sequence[LambdaTrajectory],
    site: str,
    times_ps: Sequence[float],
    n_boot: int = 500,
    seed: int = 0,
) -> pd.DataFrame:
    """Bootstrap pKa CI width using only frames before each time (per replica)."""
    rows = []
    for t_end in times_ps:
        pts = []
        for traj in trajs:
            i = traj.site_index(site)
            sel = (traj.time_ps < t_end) & ~traj.censored[:, i]
            if np.any(sel):
                pts.append({"pH": traj.pH, "replica": traj.replica, "fraction": deprotonation_fraction(traj.lambda_p[sel, i])})
        row = {"time_ps": float(t_end), "pKa": np.nan, "ci_width": np.nan}
        try:
            b = bootstrap_ci(pd.DataFrame(pts, columns=["pH", "replica", "fraction"]), "hh", n_boot, seed)
            row.update(pKa=b.estimate, ci_width=b.width)
        except CphError as e:
            logger.debug("ci_width_curve @ {} ps: {}", t_end, e.message)
        rows.append(row)
    return pd.DataFrame(rows, columns=["time_ps", "pKa", "ci_width"])


def time_to_ci_width(curve: pd.DataFrame, target: float = 0.03) -> Optional[float]:
    hit = curve[curve["ci_width"] <= target]
    return float(hit["time_ps"].iloc[0]) if not hit.empty else None


def ph_summary(dataset: TitrationDataset, site: str) -> pd.DataFrame:
    """Per pH: mean/sd fraction, transitions per ns and in-transition share."""
    t = dataset.usable(site)
    g = t.groupby("pH", sort=True)
    out = pd.DataFrame(
        {
            "mean": g["fraction"].mean(),
            "sd": g["fraction"].std(ddof=1).fillna(0.0),
            "transitions_per_ns": g["n_transitions"].sum() / (g["duration_ps"].sum() / 1000.0),
            "in_transition": g["n_in_transition"].sum() / g["n_frames"].sum(),
        }
    )
    return out.reset_index()
