"""
Goal: Functional mode analysis of protonation against conformational features.

PLS1 (NIPALS) regresses lambda_p on per-frame feature vectors, whole replicas
are held out for validation, and the regression direction becomes a scalar
"FMA trajectory". Frames are then binned at the 5/25/50/75/95th percentiles and
titrated per bin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from cphlab.models.errors import (
    CphError,
    DegenerateTargetError,
    EmptyDataError,
    InsufficientDataError,
    InvalidInputError,
)
from cphlab.models.units import deprotonated_mask
from cphlab.services.dynamics import LambdaTrajectory
from cphlab.services.titration import BootstrapResult, FitResult, bootstrap_ci, fit_hh

PERCENTILES = (5.0, 25.0, 50.0, 75.0, 95.0)
MIN_BIN_VALUES = 100
MIN_BIN_FRAMES = 100
VALIDATION_FRACTION = 0.2


# -----------------------
# PLS
# -----------------------
@dataclass
class PlsModel:
    n_components: int
    x_mean: np.ndarray
    y_mean: float
    weights: np.ndarray  # (d, k)
    loadings: np.ndarray  # (d, k)
    y_loadings: np.ndarray  # (k,)
    coef: np.ndarray  # (d,)
    r2_train: float
    r2_validation: Optional[float] = None
    train_groups: List[int] = field(default_factory=list)
    validation_groups: List[int] = field(default_factory=list)
    proj_lo: float = 0.0
    proj_hi: float = 1.0

    @property
    def n_features(self) -> int:
        return int(self.x_mean.shape[0])

    def _check(self, X: np.ndarray) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(X, dtype=float))
        if arr.shape[1] != self.n_features:
            raise InvalidInputError(f"expected {self.n_features} features, got {arr.shape[1]}")
        return arr

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.y_mean + (self._check(X) - self.x_mean) @ self.coef


def _r2(y: np.ndarray, pred: np.ndarray) -> float:
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(((y - pred) ** 2).sum()) / ss_tot


def _nipals(X: np.ndarray, y: np.ndarray, n_components: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    Xk = X.copy()
    yk = y.copy()
    W, P, q = [], [], []
    for _ in range(n_components):
        w = Xk.T @ yk
        norm = np.linalg.norm(w)
        if norm <= 1e-12:
            break
        w /= norm
        t = Xk @ w
        tt = float(t @ t)
        if tt <= 1e-12:
            break
        p = Xk.T @ t / tt
        qk = float(yk @ t) / tt
        Xk -= np.outer(t, p)
        yk -= qk * t
        W.append(w)
        P.append(p)
        q.append(qk)
    d = X.shape[1]
    return (
        np.array(W).T.reshape(d, -1),
        np.array(P).T.reshape(d, -1),
        np.array(q),
    )


def split_groups(groups: Sequence[int], fraction: float = VALIDATION_FRACTION, seed: int = 0) -> Tuple[List[int], List[int]]:
    """Hold out round(fraction * n) whole groups (at least one when there are two or more)."""
    uniq = sorted(set(int(g) for g in groups))
    if len(uniq) < 2:
        return uniq, []
    n_val = min(len(uniq) - 1, max(1, int(round(fraction * len(uniq)))))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, len(uniq)])))
    held = sorted(int(g) for g in rng.choice(uniq, size=n_val, replace=False))
    return [g for g in uniq if g not in held], held


def pls_fit(
    X: np.ndarray,
    y: np.ndarray,
    n_components: int = 20,
    groups: Optional[Sequence[int]] = None,
    seed: int = 0,
    validation_fraction: float = VALIDATION_FRACTION,
) -> PlsModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise InvalidInputError("X must be frames x features and match y")
    if n_components < 1:
        raise InvalidInputError("n_components must be >= 1")
    g = np.zeros(y.shape[0], dtype=np.int64) if groups is None else np.asarray(groups, dtype=np.int64)
    if g.shape != y.shape:
        raise InvalidInputError("groups must give one label per frame")
    train_g, val_g = split_groups(g, validation_fraction, seed) if groups is not None else ([0], [])
    train = np.isin(g, train_g)
    Xt, yt = X[train], y[train]
    if Xt.shape[0] < 2 or np.ptp(yt) == 0.0:
        raise DegenerateTargetError("lambda_p has no variance in the training frames")

    x_mean = Xt.mean(axis=0)
    y_mean = float(yt.mean())
    Xc = Xt - x_mean
    rank = int(np.linalg.matrix_rank(Xc))
    k = n_components
    if k > rank:
        logger.warning("pls: n_components {} exceeds rank {}, using {}", k, rank, max(rank, 1))
        k = max(rank, 1)
    W, P, q = _nipals(Xc, yt - y_mean, k)
    if W.shape[1] == 0:
        raise DegenerateTargetError("features carry no information about lambda_p")
    coef = W @ np.linalg.solve(P.T @ W, q)

    model = PlsModel(
        n_components=int(W.shape[1]),
        x_mean=x_mean,
        y_mean=y_mean,
        weights=W,
        loadings=P,
        y_loadings=q,
        coef=coef,
        r2_train=0.0,
        train_groups=list(train_g),
        validation_groups=list(val_g),
    )
    fitted = model.predict(Xt)
    model.r2_train = _r2(yt, fitted)
    if val_g:
        Xv, yv = X[~train], y[~train]
        model.r2_validation = _r2(yv, model.predict(Xv)) if yv.size else None
    raw = Xc @ coef
    model.proj_lo, model.proj_hi = float(raw.min()), float(raw.max())
    return model


def pls_component_scan(
    X: np.ndarray,
    y: np.ndarray,
    groups: Sequence[int],
    max_components: int = 20,
    seed: int = 0,
) -> pd.DataFrame:
    """Training/validation R^2 for 1..max_components on the same replica split."""
    rows = []
    for k in range(1, max_components + 1):
        m = pls_fit(X, y, k, groups, seed)
        rows.append({"n_components": m.n_components, "r2_train": m.r2_train, "r2_validation": m.r2_validation})
        if m.n_components < k:
            break
    return pd.DataFrame(rows, columns=["n_components", "r2_train", "r2_validation"])


def project(model: PlsModel, X: np.ndarray) -> np.ndarray:
    """Mean-centered projection on the regression direction, scaled so training frames span [0, 1]."""
    raw = (model._check(X) - model.x_mean) @ model.coef
    span = model.proj_hi - model.proj_lo
    if span <= 0.0:
        return np.zeros(raw.shape[0])
    return (raw - model.proj_lo) / span


# -----------------------
# Binning
# -----------------------
@dataclass(frozen=True)
class FmaBinning:
    edges: Tuple[float, ...]

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1

    @property
    def degenerate(self) -> bool:
        return self.edges[0] == self.edges[-1]

    def assign(self, values: Sequence[float]) -> np.ndarray:
        """Bin 0 holds values <= the 5th percentile edge, the last bin values above the 95th."""
        return np.searchsorted(np.asarray(self.edges), np.asarray(values, dtype=float), side="left")


def percentile_bins(values: Sequence[float]) -> FmaBinning:
    v = np.asarray(values, dtype=float).ravel()
    if v.size < MIN_BIN_VALUES:
        raise InsufficientDataError(f"{v.size} values, need at least {MIN_BIN_VALUES} for percentile bins")
    edges = np.percentile(v, PERCENTILES, method="inverted_cdf")
    binning = FmaBinning(tuple(float(e) for e in edges))
    if binning.degenerate:
        logger.warning("fma: all percentile edges coincide ({}), binning is degenerate", edges[0])
    return binning


@dataclass
class BinTitration:
    index: int
    n_frames: int
    fit: Optional[FitResult] = None
    ci: Optional[BootstrapResult] = None
    skipped: Optional[str] = None


def binned_titration(
    binning: FmaBinning,
    frames: pd.DataFrame,
    n_boot: int = 1000,
    seed: int = 0,
) -> List[BinTitration]:
    """Per-bin H-H titration; `frames` has pH, replica, fma, lambda_p (censored frames removed)."""
    frames = frames.assign(bin=binning.assign(frames["fma"]), deprot=deprotonated_mask(frames["lambda_p"].to_numpy()))
    ph_grid = sorted(frames["pH"].unique())
    out: List[BinTitration] = []
    for b in range(binning.n_bins):
        sub = frames[frames["bin"] == b]
        per_ph = sub.groupby("pH")["deprot"].size().reindex(ph_grid, fill_value=0)
        entry = BinTitration(index=b, n_frames=int(len(sub)))
        if int(per_ph.min()) < MIN_BIN_FRAMES:
            entry.skipped = f"fewer than {MIN_BIN_FRAMES} frames at pH {float(per_ph.idxmin()):g}"
            logger.warning("fma bin {}: skipped, {}", b, entry.skipped)
            out.append(entry)
            continue
        pts = sub.groupby(["pH", "replica"], sort=True)["deprot"].mean().rename("fraction").reset_index()
        try:
            entry.fit = fit_hh(pts["pH"], pts["fraction"])
            if pts.groupby("pH").size().min() >= 2:
                entry.ci = bootstrap_ci(pts, "hh", n_boot, seed)
        except CphError as e:
            entry.skipped = e.message
            logger.warning("fma bin {}: {}", b, e.message)
        out.append(entry)
    return out


def extreme_state_means(binning: FmaBinning, fma: Sequence[float], features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean feature vectors over the lowest and the highest FMA bin."""
    bins = binning.assign(fma)
    X = np.asarray(features, dtype=float)
    low = X[bins == 0]
    high = X[bins == binning.n_bins - 1]
    if low.shape[0] == 0 or high.shape[0] == 0:
        raise EmptyDataError("an extreme FMA bin is empty")
    return low.mean(axis=0), high.mean(axis=0)


def fma_frames(trajs: Sequence[LambdaTrajectory], site: str) -> Tuple[pd.DataFrame, np.ndarray]:
    """Uncensored frames of a site with features: (pH, replica, step, lambda_p) table and the feature matrix."""
    tables = []
    feats = []
    for traj in trajs:
        if traj.features is None:
            continue
        i = traj.site_index(site)
        keep = ~traj.censored[:, i]
        tables.append(
            pd.DataFrame(
                {"pH": traj.pH, "replica": traj.replica, "step": traj.steps[keep], "lambda_p": traj.lambda_p[keep, i]}
            )
        )
        feats.append(traj.features[keep])
    if not tables:
        raise EmptyDataError("no trajectories carry feature vectors")
    return pd.concat(tables, ignore_index=True), np.concatenate(feats)
