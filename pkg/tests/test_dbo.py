"""
Goal: DBO block decisions, censoring windows and controller bounds.
"""

import numpy as np
import pytest

from cphlab.models.errors import InvalidInputError
from cphlab.models.schemas import DboSettings, SiteSpec
from cphlab.services.bias import SitePotential
from cphlab.services.dbo import (
    BarrierAdjustState,
    SiteController,
    WellAdjustState,
    WellBlockStats,
    barrier_block_decide,
    censor_window,
    well_block_decide,
)


def _stats(n, near0, mean0, near1=0, mean1=1.0):
    return WellBlockStats(n, near0, near0 * mean0, near1, near1 * mean1)


# -----------------------
# Wells
# -----------------------
def test_well_shift_toward_ideal_minimum():
    state = WellAdjustState()
    d = well_block_decide(state, _stats(1000, 800, 0.05))
    assert d.well == 0
    assert d.shift == pytest.approx(-0.025)
    assert state.shift0 == pytest.approx(-0.025)


def test_well_needs_residency():
    assert well_block_decide(WellAdjustState(), _stats(1000, 600, 0.05)).well is None


def test_well_within_tolerance_is_left_alone():
    assert well_block_decide(WellAdjustState(), _stats(1000, 900, 0.02)).well is None


def test_well_shift_is_capped():
    state = WellAdjustState()
    for _ in range(10):
        well_block_decide(state, _stats(1000, 0, 0.0, near1=900, mean1=0.7))
    assert state.shift1 == pytest.approx(0.08)
    assert well_block_decide(state, _stats(1000, 0, 0.0, near1=900, mean1=0.7)).well is None


def test_empty_block_is_ignored():
    assert well_block_decide(WellAdjustState(), WellBlockStats(0, 0, 0.0, 0, 0.0)).well is None


def test_block_stats_from_samples():
    s = WellBlockStats.from_samples([0.0, 0.1, 0.5, 0.9, 1.0])
    assert (s.n, s.near0, s.near1) == (5, 2, 2)
    assert s.sum0 == pytest.approx(0.1)
    assert s.sum1 == pytest.approx(1.9)


# -----------------------
# Barriers
# -----------------------
def test_barrier_lowered_when_rarely_in_transition():
    state = BarrierAdjustState(height=6.0)
    assert barrier_block_decide(state, 0.1) == 5.0


def test_barrier_kept_inside_band():
    assert barrier_block_decide(BarrierAdjustState(height=6.0), 0.27) == 6.0


def test_barrier_raised_when_often_in_transition():
    assert barrier_block_decide(BarrierAdjustState(height=6.0), 0.4) == 7.0


def test_barrier_respects_bounds():
    assert barrier_block_decide(BarrierAdjustState(height=1.0), 0.05) == 1.0
    assert barrier_block_decide(BarrierAdjustState(height=20.0), 0.9) == 20.0


def test_barrier_rejects_bad_fraction():
    with pytest.raises(InvalidInputError):
        barrier_block_decide(BarrierAdjustState(), 1.5)


# -----------------------
# Censoring
# -----------------------
def test_censor_window_after_adjustment():
    times = np.arange(0, 400) * 0.5
    flags = censor_window(times, [100.0], 10.0)
    assert flags.sum() == 20
    assert flags[times == 100.0].all()
    assert not flags[times == 110.0].any()


def test_overlapping_windows_merge():
    times = np.arange(0, 400) * 0.5
    flags = censor_window(times, [100.0, 105.0], 10.0)
    assert flags.sum() == 30


def test_zero_duration_censors_nothing():
    assert not censor_window(np.arange(10.0), [3.0], 0.0).any()


# -----------------------
# Site controller
# -----------------------
def test_controller_clamps_and_reports_barrier_event():
    settings = DboSettings(barrier_max=12.0)
    site = SitePotential.from_spec(SiteSpec(id="A", pka=4.0, barrier=15.0))
    ctl = SiteController.for_site(site, settings)
    site = ctl.clamp_barriers(site)
    assert site.spline_p.barrier_height == 12.0
    ctl.add_frames(np.zeros(100), np.zeros(100))
    site, events = ctl.end_barrier_block(site, 1000.0)
    assert [(e.kind, e.target, e.old, e.new) for e in events] == [("barrier", "p", 12.0, 11.0)]
    assert site.spline_p.barrier_height == 11.0


def test_controller_tautomer_barriers_track_their_state():
    site = SitePotential.from_spec(SiteSpec(id="H", pka=6.3816, pka_delta=6.53, pka_eps=6.92))
    ctl = SiteController.for_site(site, DboSettings())
    lp = np.array([0.0] * 50 + [1.0] * 50)
    lt = np.array([0.5] * 50 + [0.0] * 50)
    ctl.add_frames(lp, lt)
    _, events = ctl.end_barrier_block(site, 1000.0)
    by_target = {e.target: e.new for e in events}
    assert by_target == {"p": 5.0, "t_prot": 7.0, "t_deprot": 5.0}


def test_controller_with_wells_disabled():
    settings = DboSettings(wells=False)
    site = SitePotential.from_spec(SiteSpec(id="A", pka=4.0))
    ctl = SiteController.for_site(site, settings)
    same, events = ctl.end_well_block(_stats(1000, 900, 0.1), site, 40.0)
    assert events == [] and same is site
