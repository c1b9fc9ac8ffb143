"""
Goal: The barrier controller holds the in-transition share inside its band,
adaptive barriers leave titration curves where fixed ones put them, and a
site stuck behind a high barrier reaches a tight pKa interval sooner with DBO.
"""

import numpy as np
import pytest
from scipy import stats

from cphlab.models.schemas import DboSettings, ExperimentSpec, RunConfig, SiteSpec
from cphlab.services.dynamics import build_system, run_replica
from cphlab.services.titration import TitrationDataset, ci_width_curve, time_to_ci_width

pytestmark = pytest.mark.slow

BAND = (0.20, 0.30)


def _runs(spec, dbo, replicas, equilibration_ps=20.0):
    system = build_system(spec)
    return [
        run_replica(system, ph, spec.run, replica=r, dbo=dbo, equilibration_ps=equilibration_ps)
        for ph in spec.ph_grid()
        for r in range(replicas)
    ]


def _block_shares(traj, block_ps):
    lam = traj.lambda_p[:, 0]
    block = np.floor(traj.time_ps / block_ps).astype(int)
    inside = (lam >= 0.2) & (lam <= 0.8)
    return np.array([inside[block == b].mean() for b in np.unique(block)])


def test_barrier_controller_holds_the_transition_band():
    settings = DboSettings(wells=False)
    spec = ExperimentSpec(
        sites=[SiteSpec(id="A", pka=4.0, barrier=12.0, mass=1.0)],
        ph_values=[4.0],
        run=RunConfig(n_steps=20_000_000, output_stride=10, seed=41),
    )
    (traj,) = _runs(spec, settings, replicas=1)
    shares = _block_shares(traj, settings.barrier_block_ps)
    in_band = (shares >= BAND[0]) & (shares <= BAND[1])
    assert in_band.any()
    settled = in_band[np.argmax(in_band):]
    assert settled.size >= 20
    assert settled.mean() >= 0.8
    # never back at the starting height once it has moved
    heights = [e.new for e in traj.events if e.kind == "barrier" and e.target == "p"]
    assert heights and max(heights) < 12.0


def test_adaptive_barriers_leave_titration_curves_unchanged():
    sites = [SiteSpec(id=f"S{k}", pka=3.0 + 0.5 * k, mass=10.0) for k in range(8)]
    spec = ExperimentSpec(
        sites=sites,
        ph_values=list(np.round(np.arange(2.0, 7.51, 0.5), 2)),
        run=RunConfig(n_steps=2_000_000, output_stride=250, seed=43),
    )
    curves = {}
    for label, dbo in (("dbo", DboSettings()), ("fixed", None)):
        data = TitrationDataset.from_trajectories(_runs(spec, dbo, replicas=3), spec.run.stride_ps)
        curves[label] = np.concatenate(
            [data.points(s.id).groupby("pH")["fraction"].mean().to_numpy() for s in sites]
        )
    r, _ = stats.pearsonr(curves["dbo"], curves["fixed"])
    assert r >= 0.99
    assert np.mean(np.abs(curves["dbo"] - curves["fixed"])) <= 0.15


def test_dbo_reaches_a_tight_interval_no_later_than_a_fixed_high_barrier():
    spec = ExperimentSpec(
        sites=[SiteSpec(id="A", pka=4.0, barrier=15.0, mass=1.0)],
        ph_values=[3.5, 4.0, 4.5],
        run=RunConfig(n_steps=10_000_000, output_stride=100, seed=47),
    )
    times = np.arange(1000.0, 20000.1, 1000.0)
    reach = {}
    for label, dbo in (("dbo", DboSettings(barrier_block_ps=50.0)), ("fixed", None)):
        curve = ci_width_curve(_runs(spec, dbo, replicas=8), "A", times, n_boot=200, seed=5)
        reach[label] = time_to_ci_width(curve, 0.03)
    assert reach["dbo"] is not None
    assert reach["fixed"] is None or reach["dbo"] <= reach["fixed"]
