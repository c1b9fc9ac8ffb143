"""
Goal: Detect and size protonation coupling between site pairs.

- binary protonation trajectories (1 = deprotonated) on uncensored frames
- plug-in entropy and normalized mutual information, natural log
- the screen: a pair is flagged when mean NMI > 0.1 and both mean entropies
  > 0.1 at some pH
- two-proton macroscopic titration fits, the exact four-microstate oracle and
  microstate coupling free energies
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.optimize import least_squares
from scipy.special import softmax

from cphlab.models.errors import FitError, InsufficientDataError, InvalidInputError
from cphlab.models.units import LN10, deprotonated_mask, kt
from cphlab.services.dynamics import LambdaTrajectory

NMI_THRESHOLD = 0.1
ENTROPY_THRESHOLD = 0.1
MIN_JOINT_FRAMES = 1000
DEFAULT_WINDOW_PS = 1500.0

State = Tuple[int, int]


# -----------------------
# Binary trajectories and information measures
# -----------------------
def binarize(lambda_p: Sequence[float], censored: Optional[Sequence[bool]] = None) -> np.ndarray:
    bits = deprotonated_mask(np.asarray(lambda_p, dtype=float)).astype(np.int8)
    if censored is not None:
        bits = bits[~np.asarray(censored, dtype=bool)]
    return bits


def pair_bits(traj: LambdaTrajectory, a: str, b: str) -> Tuple[np.ndarray, np.ndarray]:
    """Bits of two sites on frames where neither is censored."""
    i, j = traj.site_index(a), traj.site_index(b)
    keep = ~(traj.censored[:, i] | traj.censored[:, j])
    return binarize(traj.lambda_p[keep, i]), binarize(traj.lambda_p[keep, j])


def _plogp(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropy(x: Sequence[int]) -> float:
    arr = np.asarray(x)
    if arr.size == 0:
        raise InvalidInputError("entropy of an empty trajectory")
    p1 = float(np.count_nonzero(arr)) / arr.size
    return _plogp(np.array([1.0 - p1, p1]))


def joint_counts(x: Sequence[int], y: Sequence[int]) -> np.ndarray:
    xa = np.asarray(x, dtype=np.int64)
    ya = np.asarray(y, dtype=np.int64)
    if xa.shape != ya.shape:
        raise InvalidInputError(f"trajectory lengths differ ({xa.size} vs {ya.size})")
    return np.bincount(2 * xa + ya, minlength=4).reshape(2, 2).astype(float)


def mutual_information(x: Sequence[int], y: Sequence[int]) -> float:
    c = joint_counts(x, y)
    n = c.sum()
    if n == 0:
        raise InvalidInputError("mutual information of empty trajectories")
    pj = c / n
    return max(0.0, _plogp(pj.sum(axis=1)) + _plogp(pj.sum(axis=0)) - _plogp(pj.ravel()))


def nmi(x: Sequence[int], y: Sequence[int]) -> float:
    """2 I(X;Y) / (H(X) + H(Y)); 0 when both entropies vanish."""
    c = joint_counts(x, y)
    n = c.sum()
    if n == 0:
        raise InvalidInputError("nmi of empty trajectories")
    pj = c / n
    hx = _plogp(pj.sum(axis=1))
    hy = _plogp(pj.sum(axis=0))
    if hx + hy == 0.0:
        return 0.0
    mi = max(0.0, hx + hy - _plogp(pj.ravel()))
    return min(1.0, 2.0 * mi / (hx + hy))


# -----------------------
# Screen
# -----------------------
@dataclass
class PairScreen:
    a: str
    b: str
    max_nmi: float
    flagged: bool
    flag_ph: Optional[float] = None


@dataclass
class CouplingScreenResult:
    sites: List[str]
    ph_grid: List[float]
    mean_nmi: pd.DataFrame  # a, b, pH, nmi
    mean_entropy: pd.DataFrame  # site, pH, entropy
    pairs: List[PairScreen] = field(default_factory=list)

    def flagged(self) -> List[PairScreen]:
        return [p for p in self.pairs if p.flagged]

    def nmi_matrix(self) -> pd.DataFrame:
        m = pd.DataFrame(np.eye(len(self.sites)), index=self.sites, columns=self.sites)
        for p in self.pairs:
            m.loc[p.a, p.b] = m.loc[p.b, p.a] = p.max_nmi
        return m


def coupling_screen(
    trajs: Sequence[LambdaTrajectory],
    nmi_threshold: float = NMI_THRESHOLD,
    entropy_threshold: float = ENTROPY_THRESHOLD,
) -> CouplingScreenResult:
    if not trajs:
        raise InvalidInputError("no trajectories to screen")
    sites = list(trajs[0].site_ids)
    if len(sites) < 2:
        raise InvalidInputError("the coupling screen needs at least two sites")

    h_rows = []
    n_rows = []
    for traj in trajs:
        for s in sites:
            i = traj.site_index(s)
            bits = binarize(traj.lambda_p[:, i], traj.censored[:, i])
            if bits.size:
                h_rows.append({"site": s, "pH": traj.pH, "replica": traj.replica, "entropy": entropy(bits)})
        for a, b in itertools.combinations(sites, 2):
            x, y = pair_bits(traj, a, b)
            if x.size:
                n_rows.append({"a": a, "b": b, "pH": traj.pH, "replica": traj.replica, "nmi": nmi(x, y)})

    h = pd.DataFrame(h_rows, columns=["site", "pH", "replica", "entropy"])
    nm = pd.DataFrame(n_rows, columns=["a", "b", "pH", "replica", "nmi"])
    mean_h = h.groupby(["site", "pH"], sort=True)["entropy"].mean().reset_index()
    mean_nmi = nm.groupby(["a", "b", "pH"], sort=True)["nmi"].mean().reset_index()
    h_lookup = {(r.site, float(r.pH)): float(r.entropy) for r in mean_h.itertuples()}

    pairs = []
    for a, b in itertools.combinations(sites, 2):
        rows = mean_nmi[(mean_nmi["a"] == a) & (mean_nmi["b"] == b)]
        max_nmi = float(rows["nmi"].max()) if not rows.empty else 0.0
        flag_ph = None
        for r in rows.itertuples():
            ph = float(r.pH)
            if (
                r.nmi > nmi_threshold
                and h_lookup.get((a, ph), 0.0) > entropy_threshold
                and h_lookup.get((b, ph), 0.0) > entropy_threshold
            ):
                flag_ph = ph
                break
        pairs.append(PairScreen(a, b, max_nmi, flag_ph is not None, flag_ph))
        if flag_ph is not None:
            logger.info("coupling screen: {}-{} flagged at pH {} (max NMI {:.3f})", a, b, flag_ph, max_nmi)
    ph_grid = sorted({float(t.pH) for t in trajs})
    return CouplingScreenResult(sites, ph_grid, mean_nmi, mean_h, pairs)


# -----------------------
# Two-proton macroscopic titration
# -----------------------
@dataclass(frozen=True)
class MacroFit:
    pka1: float
    pka2: float
    sse: float
    converged: bool


def macro_two_curve(ph: Sequence[float] | float, pka1: float, pka2: float) -> np.ndarray:
    """Mean bound protons <X> of a two-proton system; 2 at low pH, 0 at high pH."""
    p = np.asarray(ph, dtype=float)
    logits = LN10 * np.stack([np.zeros_like(p), pka2 - p, pka1 + pka2 - 2.0 * p], axis=-1)
    w = softmax(logits, axis=-1)
    return w[..., 1] + 2.0 * w[..., 2]


def _crossing(ph: np.ndarray, x: np.ndarray, level: float) -> float:
    return float(ph[np.argmin(np.abs(x - level))])


def fit_macroscopic_two(ph: Sequence[float], x: Sequence[float]) -> MacroFit:
    ph_arr = np.asarray(ph, dtype=float)
    x_arr = np.asarray(x, dtype=float)
    if ph_arr.shape != x_arr.shape or ph_arr.ndim != 1:
        raise InvalidInputError("pH and <X> arrays must be 1-D and equally long")
    if np.any(x_arr < 0.0) or np.any(x_arr > 2.0):
        raise InvalidInputError("<X> must lie in [0, 2]")
    if np.unique(ph_arr).size < 4:
        raise InvalidInputError("need at least 4 distinct pH values")

    def residuals(p: np.ndarray) -> np.ndarray:
        return macro_two_curve(ph_arr, p[0], p[1]) - x_arr

    def jac(p: np.ndarray) -> np.ndarray:
        logits = LN10 * np.stack([np.zeros_like(ph_arr), p[1] - ph_arr, p[0] + p[1] - 2.0 * ph_arr], axis=-1)
        w = softmax(logits, axis=-1)
        X = w[:, 1] + 2.0 * w[:, 2]
        return np.stack([LN10 * w[:, 2] * (2.0 - X), LN10 * X * w[:, 0]], axis=1)

    p0 = np.array([_crossing(ph_arr, x_arr, 1.5), _crossing(ph_arr, x_arr, 0.5)])
    if p0[0] >= p0[1]:
        mid = 0.5 * (p0[0] + p0[1])
        p0 = np.array([mid - 0.5, mid + 0.5])
    res = least_squares(residuals, p0, jac=jac, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    grad = float(np.linalg.norm(res.grad))
    diagnostics = {"p0": p0.tolist(), "status": int(res.status), "grad_norm": grad, "nfev": int(res.nfev)}
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitError(f"macroscopic fit did not converge: {res.message}", diagnostics=diagnostics)
    r = residuals(res.x)
    return MacroFit(float(res.x[0]), float(res.x[1]), float(r @ r), grad < 1e-8)


def protons_bound(traj: LambdaTrajectory, a: str, b: str) -> float:
    x, y = pair_bits(traj, a, b)
    if x.size == 0:
        raise InsufficientDataError(f"{a}-{b}: no jointly uncensored frames")
    return float(2.0 - x.mean() - y.mean())


def macro_points(trajs: Sequence[LambdaTrajectory], a: str, b: str) -> pd.DataFrame:
    rows = []
    for traj in trajs:
        try:
            rows.append({"pH": traj.pH, "replica": traj.replica, "x": protons_bound(traj, a, b)})
        except InsufficientDataError:
            continue
    return pd.DataFrame(rows, columns=["pH", "replica", "x"])


# -----------------------
# Exact four-microstate model
# -----------------------
def pair_microstate_probabilities(
    pka_a: float, pka_b: float, J: float, pH: float, temperature: float = 300.0
) -> Dict[State, float]:
    """(bit_a, bit_b) -> probability, bit 1 = deprotonated; J applies when both are deprotonated."""
    b = 1.0 / kt(temperature)
    ga = LN10 * (pka_a - pH) / b
    gb = LN10 * (pka_b - pH) / b
    energies = {(0, 0): 0.0, (1, 0): ga, (0, 1): gb, (1, 1): ga + gb + J}
    e = np.array(list(energies.values()))
    p = softmax(-b * e)
    return {k: float(v) for k, v in zip(energies, p)}


def macroscopic_pkas_exact(pka_a: float, pka_b: float, J: float, temperature: float = 300.0) -> Tuple[float, float]:
    pk1 = -math.log10(10.0 ** (-pka_a) + 10.0 ** (-pka_b))
    pk_sum = pka_a + pka_b + J / (kt(temperature) * LN10)
    return pk1, pk_sum - pk1


# -----------------------
# Coupling free energy and microstate series
# -----------------------
@dataclass(frozen=True)
class CouplingFreeEnergy:
    value: Optional[float]
    reason: Optional[str] = None

    @property
    def defined(self) -> bool:
        return self.value is not None


def coupling_free_energy(
    counts: np.ndarray,
    state: State = (1, 1),
    temperature: float = 300.0,
    min_frames: int = MIN_JOINT_FRAMES,
) -> CouplingFreeEnergy:
    """kT (ln P(a and b) - ln P(a) - ln P(b)) for the joint state `state` of a 2x2 count table."""
    c = np.asarray(counts, dtype=float)
    if c.shape != (2, 2) or np.any(c < 0):
        raise InvalidInputError("counts must be a non-negative 2x2 table")
    total = c.sum()
    if total < min_frames:
        raise InsufficientDataError(f"{int(total)} joint frames, need at least {min_frames}")
    if np.any(c == 0):
        return CouplingFreeEnergy(None, "zero-count microstate")
    p = c / total
    sa, sb = state
    pa = p[sa, :].sum()
    pb = p[:, sb].sum()
    return CouplingFreeEnergy(float(kt(temperature) * (math.log(p[sa, sb]) - math.log(pa) - math.log(pb))))


def microstate_fraction_series(
    bits_a: Sequence[int],
    bits_b: Sequence[int],
    stride_ps: float,
    window_ps: float = DEFAULT_WINDOW_PS,
    state: State = (0, 1),
) -> pd.DataFrame:
    """Occupancy of one joint microstate in consecutive non-overlapping windows."""
    x = np.asarray(bits_a, dtype=np.int8)
    y = np.asarray(bits_b, dtype=np.int8)
    if x.shape != y.shape:
        raise InvalidInputError("trajectory lengths differ")
    if not stride_ps > 0 or not window_ps > 0:
        raise InvalidInputError("stride and window must be > 0")
    per = max(1, int(round(window_ps / stride_ps)))
    if per < 10:
        logger.warning("microstate window spans only {} frames", per)
    n_win = x.size // per
    hit = ((x == state[0]) & (y == state[1]))[: n_win * per].reshape(n_win, per)
    start = np.arange(n_win) * per * stride_ps
    return pd.DataFrame({"t_start_ps": start, "t_end_ps": start + per * stride_ps, "fraction": hit.mean(axis=1)})


def microstate_fractions(trajs: Sequence[LambdaTrajectory], a: str, b: str) -> pd.DataFrame:
    """Per (pH, replica): the share of each joint microstate p00, p01, p10, p11."""
    rows = []
    for traj in trajs:
        x, y = pair_bits(traj, a, b)
        if x.size == 0:
            continue
        p = joint_counts(x, y) / x.size
        rows.append({"pH": traj.pH, "replica": traj.replica, "p00": p[0, 0], "p01": p[0, 1], "p10": p[1, 0], "p11": p[1, 1]})
    return pd.DataFrame(rows, columns=["pH", "replica", "p00", "p01", "p10", "p11"])


def pooled_counts(trajs: Sequence[LambdaTrajectory], a: str, b: str, pH: float) -> np.ndarray:
    total = np.zeros((2, 2))
    for traj in trajs:
        if math.isclose(traj.pH, pH, abs_tol=1e-9):
            x, y = pair_bits(traj, a, b)
            total += joint_counts(x, y)
    return total
