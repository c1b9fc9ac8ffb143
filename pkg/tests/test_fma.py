"""
Goal: PLS regression, FMA projection, percentile binning and binned titration
on synthetic features with a known answer.
"""

import numpy as np
import pandas as pd
import pytest

from cphlab.models.errors import DegenerateTargetError, EmptyDataError, InsufficientDataError, InvalidInputError
from cphlab.models.units import hh_fraction
from cphlab.services.dynamics import LambdaTrajectory
from cphlab.services.fma import (
    binned_titration,
    extreme_state_means,
    fma_frames,
    percentile_bins,
    pls_component_scan,
    pls_fit,
    project,
    split_groups,
)


def _linear_data(n=600, d=6, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    beta = np.arange(1, d + 1, dtype=float)
    return X, X @ beta + 0.5, np.repeat(np.arange(6), n // 6)


# -----------------------
# PLS
# -----------------------
def test_exact_linear_target_is_fit():
    X, y, _ = _linear_data()
    m = pls_fit(X, y, n_components=6)
    assert m.r2_train == pytest.approx(1.0, abs=1e-10)
    assert m.predict(X) == pytest.approx(y, abs=1e-8)


def test_full_rank_pls_equals_least_squares():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 5))
    y = rng.normal(size=300)
    m = pls_fit(X, y, n_components=5)
    A = np.column_stack([np.ones(300), X])
    ols = np.linalg.lstsq(A, y, rcond=None)[0]
    assert m.coef == pytest.approx(ols[1:], abs=1e-8)


def test_weights_are_orthonormal():
    X, y, _ = _linear_data(d=8)
    y = y + np.random.default_rng(3).normal(size=y.size)
    m = pls_fit(X, y, n_components=4)
    assert m.weights.T @ m.weights == pytest.approx(np.eye(4), abs=1e-10)


def test_noise_target_generalizes_poorly():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(600, 10))
    y = rng.normal(size=600)
    m = pls_fit(X, y, n_components=3, groups=np.repeat(np.arange(6), 100))
    assert m.r2_validation is not None and m.r2_validation < 0.05


def test_components_are_clipped_to_rank():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(200, 2))
    X = np.column_stack([base, base.sum(axis=1)])
    m = pls_fit(X, base[:, 0], n_components=20)
    assert m.n_components == 2


def test_constant_target_is_degenerate():
    with pytest.raises(DegenerateTargetError):
        pls_fit(np.random.default_rng(0).normal(size=(50, 3)), np.ones(50))


def test_feature_count_is_checked():
    X, y, _ = _linear_data()
    m = pls_fit(X, y, 2)
    with pytest.raises(InvalidInputError):
        m.predict(X[:, :3])


def test_replica_split_holds_out_whole_groups():
    train, val = split_groups(list(range(10)) * 3, 0.2, seed=4)
    assert len(val) == 2
    assert set(train) | set(val) == set(range(10))
    assert not set(train) & set(val)
    assert split_groups([0, 0, 0]) == ([0], [])


def test_component_scan_columns():
    X, y, g = _linear_data()
    scan = pls_component_scan(X, y + np.random.default_rng(0).normal(size=y.size), g, max_components=3)
    assert list(scan.columns) == ["n_components", "r2_train", "r2_validation"]
    assert scan["r2_train"].is_monotonic_increasing


def test_projection_spans_unit_interval():
    X, y, _ = _linear_data()
    m = pls_fit(X, y, 3)
    p = project(m, X)
    assert p.min() == pytest.approx(0.0, abs=1e-12)
    assert p.max() == pytest.approx(1.0, abs=1e-12)


# -----------------------
# Binning
# -----------------------
def test_percentile_edges():
    b = percentile_bins(np.arange(1, 101))
    assert b.edges == (5.0, 25.0, 50.0, 75.0, 95.0)
    assert b.n_bins == 6
    assert b.assign([1, 5, 6, 96]).tolist() == [0, 0, 1, 5]


def test_equal_values_are_degenerate():
    assert percentile_bins(np.full(200, 0.3)).degenerate


def test_binning_needs_enough_values():
    with pytest.raises(InsufficientDataError):
        percentile_bins(np.arange(99))


def test_binned_titration_separates_conformations():
    """Frames with low FMA titrate at pKa 3.5, frames with high FMA at pKa 4.5."""
    rng = np.random.default_rng(8)
    rows = []
    for ph in (3.0, 3.5, 4.0, 4.5, 5.0):
        for r in range(3):
            fma = rng.random(4000)
            pka = np.where(fma < 0.5, 3.5, 4.5)
            lp = (rng.random(4000) < hh_fraction(ph, pka)).astype(float)
            rows.append(pd.DataFrame({"pH": ph, "replica": r, "fma": fma, "lambda_p": lp}))
    frames = pd.concat(rows, ignore_index=True)
    binning = percentile_bins(frames["fma"])
    result = binned_titration(binning, frames, n_boot=100, seed=1)
    assert len(result) == 6
    low, high = result[0], result[-1]
    assert low.fit is not None and high.fit is not None
    assert low.fit.pKa == pytest.approx(3.5, abs=0.1)
    assert high.fit.pKa == pytest.approx(4.5, abs=0.1)
    assert low.ci is not None and low.ci.ci_lo <= low.fit.pKa <= low.ci.ci_hi


def test_sparse_bins_are_skipped():
    frames = pd.DataFrame(
        {"pH": [4.0] * 150 + [5.0] * 150, "replica": 0, "fma": np.linspace(0, 1, 300), "lambda_p": 0.0}
    )
    result = binned_titration(percentile_bins(frames["fma"]), frames, n_boot=10)
    assert all(b.skipped for b in result)


def test_extreme_state_means():
    fma = np.linspace(0, 1, 200)
    features = np.column_stack([fma, -fma])
    low, high = extreme_state_means(percentile_bins(fma), fma, features)
    assert low[0] < 0.06 and high[0] > 0.94
    assert high[1] == pytest.approx(-high[0])


def test_frames_need_features():
    traj = LambdaTrajectory(
        site_ids=("A",),
        pH=4.0,
        replica=0,
        dt=0.002,
        steps=np.arange(3),
        lambda_p=np.zeros((3, 1)),
        lambda_t=np.zeros((3, 1)),
        censored=np.zeros((3, 1), dtype=bool),
    )
    with pytest.raises(EmptyDataError):
        fma_frames([traj], "A")
    traj.features = np.ones((3, 2))
    traj.censored[1, 0] = True
    table, X = fma_frames([traj], "A")
    assert len(table) == 2 and X.shape == (2, 2)
