"""
Goal: Dynamic barrier and well optimization (DBO) controllers.

Well control (every 40 ps): if lp spent > 70% of the block near one end and its
mean there is off the ideal 0/1 by > 0.03, move that well center by
0.5*(ideal - mean), keeping the total shift within +/-0.08.

Barrier control (every 1 ns): count in-transition frames (0.2 < lambda < 0.8);
below 20% lower the barrier by 1 kJ/mol, above 30% raise it, always inside
[1, 20] kJ/mol. Tautomer coordinates keep one barrier per protonation state.

Frames within 10 ps after any change to a site are censored for that site.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from cphlab.models.errors import InvalidInputError
from cphlab.models.schemas import DboSettings
from cphlab.models.units import DEPROT_THRESHOLD
from cphlab.services.bias import SitePotential

_TIME_EPS = 1e-9


@dataclass
class WellAdjustState:
    block_ps: float = 40.0
    residency: float = 0.70
    near_low: float = 0.2
    near_high: float = 0.8
    tolerance: float = 0.03
    gain: float = 0.5
    cap: float = 0.08
    shift0: float = 0.0
    shift1: float = 0.0

    @classmethod
    def from_settings(cls, s: DboSettings) -> "WellAdjustState":
        return cls(
            block_ps=s.well_block_ps,
            residency=s.well_residency,
            near_low=s.near_low,
            near_high=s.near_high,
            tolerance=s.mean_tolerance,
            gain=s.shift_gain,
            cap=s.shift_cap,
        )


@dataclass(frozen=True)
class WellBlockStats:
    """Per-block accumulators: samples, and per region (count, sum of lambda)."""

    n: int
    near0: int
    sum0: float
    near1: int
    sum1: float

    @classmethod
    def from_samples(cls, lam: Sequence[float], near_low: float = 0.2, near_high: float = 0.8) -> "WellBlockStats":
        x = np.asarray(lam, dtype=float)
        lo = x < near_low
        hi = x > near_high
        return cls(int(x.size), int(lo.sum()), float(x[lo].sum()), int(hi.sum()), float(x[hi].sum()))


@dataclass(frozen=True)
class WellDecision:
    well: Optional[int] = None
    shift: float = 0.0


def well_block_decide(state: WellAdjustState, stats: WellBlockStats) -> WellDecision:
    """Decide one well block; updates the cumulative shift in `state`."""
    if stats.n <= 0:
        return WellDecision()
    for well, count, total, ideal in ((0, stats.near0, stats.sum0, 0.0), (1, stats.near1, stats.sum1, 1.0)):
        if count / stats.n <= state.residency or count == 0:
            continue
        diff = ideal - total / count
        if abs(diff) <= state.tolerance:
            return WellDecision()
        current = state.shift0 if well == 0 else state.shift1
        wanted = float(np.clip(current + state.gain * diff, -state.cap, state.cap))
        step = wanted - current
        if step == 0.0:
            return WellDecision()
        if well == 0:
            state.shift0 = wanted
        else:
            state.shift1 = wanted
        return WellDecision(well, step)
    return WellDecision()


@dataclass
class BarrierAdjustState:
    height: float = 6.0
    block_ps: float = 1000.0
    band: Tuple[float, float] = (0.2, 0.8)
    target: float = 0.25
    tolerance: float = 0.05
    increment: float = 1.0
    bounds: Tuple[float, float] = (1.0, 20.0)

    @classmethod
    def from_settings(cls, s: DboSettings, height: float) -> "BarrierAdjustState":
        return cls(
            height=float(np.clip(height, s.barrier_min, s.barrier_max)),
            block_ps=s.barrier_block_ps,
            band=(s.transition_low, s.transition_high),
            target=s.transition_target,
            tolerance=s.transition_tolerance,
            increment=s.barrier_step,
            bounds=(s.barrier_min, s.barrier_max),
        )


def barrier_block_decide(state: BarrierAdjustState, in_transition_fraction: float) -> float:
    if not 0.0 <= in_transition_fraction <= 1.0:
        raise InvalidInputError(f"in-transition fraction must be in [0, 1], got {in_transition_fraction}")
    lo, hi = state.bounds
    if in_transition_fraction < state.target - state.tolerance:
        state.height = max(lo, state.height - state.increment)
    elif in_transition_fraction > state.target + state.tolerance:
        state.height = min(hi, state.height + state.increment)
    return state.height


def censor_window(
    frame_times: Sequence[float],
    adjustment_times: Sequence[float],
    duration: float = 10.0,
) -> np.ndarray:
    """Flag frames in [t, t + duration) for every adjustment time t; overlapping windows merge."""
    times = np.asarray(frame_times, dtype=float)
    flags = np.zeros(times.shape, dtype=bool)
    for t in adjustment_times:
        flags |= (times >= t - _TIME_EPS) & (times < t + duration - _TIME_EPS)
    return flags


@dataclass(frozen=True)
class ControllerEvent:
    time_ps: float
    site: str
    kind: str  # well | barrier
    target: str  # well0, well1, p, t_prot, t_deprot
    old: float
    new: float


@dataclass
class _TransitionCounter:
    frames: int = 0
    in_transition: int = 0

    def fraction(self) -> Optional[float]:
        return self.in_transition / self.frames if self.frames else None

    def reset(self) -> None:
        self.frames = 0
        self.in_transition = 0


@dataclass
class SiteController:
    """Well and barrier controllers for one site; mutates nothing but its own state."""

    site_id: str
    settings: DboSettings
    has_tautomers: bool
    wells: WellAdjustState
    barrier_p: BarrierAdjustState
    barrier_t: Dict[str, BarrierAdjustState] = field(default_factory=dict)
    _count_p: _TransitionCounter = field(default_factory=_TransitionCounter)
    _count_t: Dict[str, _TransitionCounter] = field(default_factory=dict)

    @classmethod
    def for_site(cls, site: SitePotential, settings: DboSettings) -> "SiteController":
        barrier_t = {}
        if site.has_tautomers:
            barrier_t = {
                "t_prot": BarrierAdjustState.from_settings(settings, site.spline_t_prot.barrier_height),
                "t_deprot": BarrierAdjustState.from_settings(settings, site.spline_t_deprot.barrier_height),
            }
        return cls(
            site_id=site.site_id,
            settings=settings,
            has_tautomers=site.has_tautomers,
            wells=WellAdjustState.from_settings(settings),
            barrier_p=BarrierAdjustState.from_settings(settings, site.spline_p.barrier_height),
            barrier_t=barrier_t,
            _count_t={k: _TransitionCounter() for k in barrier_t},
        )

    def clamp_barriers(self, site: SitePotential) -> SitePotential:
        """Bring the starting barriers inside the controller bounds."""
        update = {"spline_p": site.spline_p.with_barrier(self.barrier_p.height)}
        if self.has_tautomers:
            update["spline_t_prot"] = site.spline_t_prot.with_barrier(self.barrier_t["t_prot"].height)
            update["spline_t_deprot"] = site.spline_t_deprot.with_barrier(self.barrier_t["t_deprot"].height)
        return site.model_copy(update=update)

    def add_frames(self, lambda_p: np.ndarray, lambda_t: np.ndarray) -> None:
        lo, hi = self.settings.transition_low, self.settings.transition_high
        lp = np.asarray(lambda_p, dtype=float)
        self._count_p.frames += int(lp.size)
        self._count_p.in_transition += int(np.count_nonzero((lp > lo) & (lp < hi)))
        if self.has_tautomers:
            lt = np.asarray(lambda_t, dtype=float)
            deprot = lp >= DEPROT_THRESHOLD
            for key, mask in (("t_prot", ~deprot), ("t_deprot", deprot)):
                sel = lt[mask]
                self._count_t[key].frames += int(sel.size)
                self._count_t[key].in_transition += int(np.count_nonzero((sel > lo) & (sel < hi)))

    def end_well_block(
        self, stats: WellBlockStats, site: SitePotential, time_ps: float
    ) -> Tuple[SitePotential, List[ControllerEvent]]:
        if not self.settings.wells:
            return site, []
        decision = well_block_decide(self.wells, stats)
        if decision.well is None:
            return site, []
        sp = site.spline_p
        c0 = 0.0 + self.wells.shift0
        c1 = 1.0 + self.wells.shift1
        old = sp.well0_center if decision.well == 0 else sp.well1_center
        new = c0 if decision.well == 0 else c1
        event = ControllerEvent(time_ps, self.site_id, "well", f"well{decision.well}", old, new)
        logger.info("dbo {} @ {:.1f} ps: well{} center {:.4f} -> {:.4f}", self.site_id, time_ps, decision.well, old, new)
        return site.model_copy(update={"spline_p": sp.with_centers(c0, c1)}), [event]

    def end_barrier_block(self, site: SitePotential, time_ps: float) -> Tuple[SitePotential, List[ControllerEvent]]:
        if not self.settings.barriers:
            self._count_p.reset()
            for c in self._count_t.values():
                c.reset()
            return site, []
        events: List[ControllerEvent] = []
        update = {}
        frac = self._count_p.fraction()
        if frac is not None:
            old = self.barrier_p.height
            new = barrier_block_decide(self.barrier_p, frac)
            if new != old:
                events.append(ControllerEvent(time_ps, self.site_id, "barrier", "p", old, new))
                update["spline_p"] = site.spline_p.with_barrier(new)
        for key, state in self.barrier_t.items():
            frac_t = self._count_t[key].fraction()
            if frac_t is None:
                continue
            old = state.height
            new = barrier_block_decide(state, frac_t)
            if new != old:
                events.append(ControllerEvent(time_ps, self.site_id, "barrier", key, old, new))
                spline_key = "spline_t_prot" if key == "t_prot" else "spline_t_deprot"
                update[spline_key] = getattr(site, spline_key).with_barrier(new)
        self._count_p.reset()
        for c in self._count_t.values():
            c.reset()
        for ev in events:
            logger.info("dbo {} @ {:.1f} ps: barrier {} {:.1f} -> {:.1f}", ev.site, ev.time_ps, ev.target, ev.old, ev.new)
        return (site.model_copy(update=update) if update else site), events
