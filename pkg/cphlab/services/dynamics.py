"""
Goal: Lambda dynamics for one (pH, replica) cell.

Velocity Verlet with a global stochastic velocity-rescaling thermostat over
all integrated lambda coordinates. The heavy loop lives in kernels.py; this
module packs the system, pre-draws the random numbers, runs the equilibration
and production protocol, drives the DBO controllers between chunks and
re-applies PFC after every controller change.

RNG streams: SeedSequence([seed, replica, pH key]) spawns independent streams
for the initial velocities, the thermostat, the latent chains and the features.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from cphlab.models.errors import IntegrationDivergedError, InvalidInputError
from cphlab.models.schemas import DboSettings, ExperimentSpec, LambdaSite, RunConfig
from cphlab.models.units import delta_g_chem, kt
from cphlab.services import kernels
from cphlab.services.bias import CalibrationPolynomial, SitePotential
from cphlab.services.dbo import ControllerEvent, SiteController, WellBlockStats, censor_window
from cphlab.services.environment import ChargeLedger, EnvironmentModel, LatentChain, chain_path
from cphlab.services.pfc import correct_site

DEFAULT_CHUNK = 100_000


# -----------------------
# System and packing
# -----------------------
@dataclass
class LambdaSystem:
    sites: List[SitePotential]
    env: EnvironmentModel
    masses: np.ndarray
    fixed: Dict[int, int] = field(default_factory=dict)  # site index -> 0/1
    charges: Optional[ChargeLedger] = None

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def site_ids(self) -> Tuple[str, ...]:
        return tuple(s.site_id for s in self.sites)

    @property
    def has_t(self) -> np.ndarray:
        return np.array([s.has_tautomers for s in self.sites], dtype=np.bool_)

    @property
    def active_p(self) -> np.ndarray:
        return np.array([i not in self.fixed for i in range(self.n_sites)], dtype=np.bool_)


def build_system(
    spec: ExperimentSpec,
    vmm: Optional[Mapping[str, CalibrationPolynomial]] = None,
) -> LambdaSystem:
    vmm = vmm or {}
    sites = [SitePotential.from_spec(s, vmm.get(s.id), spec.run.temperature) for s in spec.sites]
    index = {s: k for k, s in enumerate(spec.site_ids)}
    return LambdaSystem(
        sites=sites,
        env=EnvironmentModel.from_spec(spec),
        masses=np.array([s.mass for s in spec.sites], dtype=float),
        fixed={index[name]: state for name, state in spec.fixed_protonation.items()},
        charges=ChargeLedger.from_spec(spec),
    )


@dataclass(frozen=True)
class PackedSystem:
    poly: np.ndarray
    dg: np.ndarray
    sx: np.ndarray
    sc: np.ndarray
    se: np.ndarray
    wall_k: np.ndarray
    g_taut: np.ndarray
    has_t: np.ndarray
    active_p: np.ndarray
    w: np.ndarray
    J: np.ndarray
    chain_shift: np.ndarray


def _pad(a: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros((size, size))
    out[: a.shape[0], : a.shape[1]] = a
    return out


def pack_system(system: LambdaSystem, sites: Sequence[SitePotential], pH: float, temperature: float) -> PackedSystem:
    n = len(sites)
    polys = []
    for s in sites:
        parts = [p.array() for p in (s.vmm, s.reference) if p is not None]
        polys.append(parts)
    size = max([1] + [max(a.shape) for parts in polys for a in parts])
    poly = np.zeros((n, size, size))
    for i, parts in enumerate(polys):
        for a in parts:
            poly[i] += _pad(a, size)
    sx = np.zeros((n, 3, 5))
    sc = np.zeros((n, 3, 4, 4))
    se = np.zeros((n, 3, 4))
    for i, s in enumerate(sites):
        for slot, sp in enumerate((s.spline_p, s.spline_t_prot, s.spline_t_deprot)):
            sx[i, slot], sc[i, slot], se[i, slot] = sp.segments()
    return PackedSystem(
        poly=poly,
        dg=np.array([delta_g_chem(s.pka, pH, temperature) for s in sites]),
        sx=sx,
        sc=sc,
        se=se,
        wall_k=np.array([s.spline_p.wall_stiffness for s in sites]),
        g_taut=np.array([s.g_taut for s in sites]),
        has_t=np.array([s.has_tautomers for s in sites], dtype=np.bool_),
        active_p=system.active_p,
        w=np.ascontiguousarray(system.env.w, dtype=float),
        J=np.ascontiguousarray(system.env.J, dtype=float),
        chain_shift=np.ascontiguousarray(system.env.chain_shift, dtype=float),
    )


# -----------------------
# State, forces, steps
# -----------------------
@dataclass
class LambdaState:
    lambda_p: np.ndarray
    lambda_t: np.ndarray
    vel_p: np.ndarray
    vel_t: np.ndarray

    def copy(self) -> "LambdaState":
        return LambdaState(self.lambda_p.copy(), self.lambda_t.copy(), self.vel_p.copy(), self.vel_t.copy())


def _chain_state(system: LambdaSystem, chain_state: Optional[Sequence[int]]) -> np.ndarray:
    if chain_state is None:
        return np.array([c.state for c in system.env.chains], dtype=np.int64)
    return np.asarray(chain_state, dtype=np.int64)


def total_energy_grad(
    system: LambdaSystem,
    state: LambdaState,
    pH: float,
    temperature: float = 300.0,
    chain_state: Optional[Sequence[int]] = None,
) -> Tuple[float, np.ndarray, np.ndarray]:
    p = pack_system(system, system.sites, pH, temperature)
    gp = np.zeros(system.n_sites)
    gt = np.zeros(system.n_sites)
    e = kernels.system_energy_grad(
        np.asarray(state.lambda_p, dtype=float),
        np.asarray(state.lambda_t, dtype=float),
        p.poly, p.dg, p.sx, p.sc, p.se, p.wall_k, p.g_taut, p.has_t, p.w, p.J,
        p.chain_shift, _chain_state(system, chain_state), gp, gt,
    )
    return float(e), gp, gt


def total_energy(
    system: LambdaSystem,
    state: LambdaState,
    pH: float,
    temperature: float = 300.0,
    chain_state: Optional[Sequence[int]] = None,
) -> float:
    return total_energy_grad(system, state, pH, temperature, chain_state)[0]


def total_force(
    system: LambdaSystem,
    state: LambdaState,
    pH: float,
    temperature: float = 300.0,
    chain_state: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-site (F_p, F_t) = -dH/dlambda, kJ/mol."""
    _, gp, gt = total_energy_grad(system, state, pH, temperature, chain_state)
    gt = np.where(system.has_t, gt, 0.0)
    return -gp, -gt


@dataclass
class IntegratorState:
    x: np.ndarray
    v: np.ndarray
    f: np.ndarray


ForceFn = Callable[[np.ndarray], np.ndarray]


def vv_step(state: IntegratorState, dt: float, masses: np.ndarray, force_fn: ForceFn) -> IntegratorState:
    """Half kick, drift, new force, half kick; the same kernels integrate_chunk steps with."""
    if not dt > 0:
        raise InvalidInputError("dt must be > 0")
    x = np.array(state.x, dtype=float)
    v = np.array(state.v, dtype=float)
    m = np.broadcast_to(np.asarray(masses, dtype=float), x.shape).copy()
    active = np.ones(x.shape[0], dtype=np.bool_)
    kernels.half_kick(v, -np.asarray(state.f, dtype=float), m, active, 0.5 * dt)
    kernels.drift(x, v, active, dt)
    f = np.asarray(force_fn(x.copy()), dtype=float)
    kernels.half_kick(v, -f, m, active, 0.5 * dt)
    return IntegratorState(x, v, f)


def thermostat_step(
    velocities: np.ndarray,
    masses: np.ndarray,
    dt: float,
    rng: np.random.Generator,
    tau: float = 1.0,
    temperature: float = 300.0,
) -> np.ndarray:
    """Stochastic velocity rescaling of all given degrees of freedom together."""
    if not tau > 0:
        raise InvalidInputError("tau must be > 0")
    v = np.asarray(velocities, dtype=float)
    if math.isinf(tau):
        return v.copy()
    nf = v.size
    m = np.broadcast_to(np.asarray(masses, dtype=float), v.shape).copy()
    kinetic = kernels.kinetic_energy(v, m, np.ones(nf, dtype=np.bool_))
    c = math.exp(-dt / tau)
    r1 = float(rng.standard_normal())
    s = float(rng.chisquare(nf - 1)) if nf > 1 else 0.0
    return v * kernels.bussi_alpha(kinetic, 0.5 * nf * kt(temperature), nf, c, r1, s)


# -----------------------
# Trajectories
# -----------------------
@dataclass
class LambdaTrajectory:
    site_ids: Tuple[str, ...]
    pH: float
    replica: int
    dt: float
    steps: np.ndarray  # (F,)
    lambda_p: np.ndarray  # (F, n)
    lambda_t: np.ndarray  # (F, n)
    censored: np.ndarray  # (F, n) bool
    features: Optional[np.ndarray] = None  # (F, d)
    total_charge: Optional[np.ndarray] = None  # (F,) residues + buffers
    events: List[ControllerEvent] = field(default_factory=list)
    final_state: List[LambdaSite] = field(default_factory=list)

    @property
    def time_ps(self) -> np.ndarray:
        return self.steps * self.dt

    @property
    def n_frames(self) -> int:
        return int(self.steps.shape[0])

    @property
    def charge_drift(self) -> float:
        if self.total_charge is None or self.total_charge.size == 0:
            return 0.0
        return float(np.ptp(self.total_charge))

    def site_index(self, site: str) -> int:
        try:
            return self.site_ids.index(site)
        except ValueError:
            raise InvalidInputError(f"unknown site {site!r}") from None


def ph_key(pH: float) -> int:
    return int(round(pH * 1000.0)) & 0xFFFFFFFF


def cell_seed_sequence(seed: int, replica: int, pH: float) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, replica, ph_key(pH)])


def _frames_in(step0: int, n: int, stride: int) -> int:
    first = -(-step0 // stride) * stride
    end = step0 + n
    return 0 if first >= end else (end - 1 - first) // stride + 1


def _with_barriers(site: SitePotential, height: float) -> SitePotential:
    return site.model_copy(
        update={
            "spline_p": site.spline_p.with_barrier(height),
            "spline_t_prot": site.spline_t_prot.with_barrier(height),
            "spline_t_deprot": site.spline_t_deprot.with_barrier(height),
        }
    )


class _Segment:
    """Shared machinery to advance state + chains over a span of steps."""

    def __init__(
        self,
        system: LambdaSystem,
        config: RunConfig,
        state: LambdaState,
        chains: List[LatentChain],
        thermo_rng: np.random.Generator,
        chain_rng: np.random.Generator,
    ) -> None:
        self.system = system
        self.config = config
        self.state = state
        self.chains = chains
        self.thermo_rng = thermo_rng
        self.chain_rng = chain_rng
        self.nf = int(system.active_p.sum() + system.has_t.sum())
        tau = config.thermostat_tau
        self.thermo_on = not math.isinf(tau)
        self.c_thermo = math.exp(-config.dt / tau) if self.thermo_on else 1.0
        self.kt = kt(config.temperature)

    def run(
        self, packed: PackedSystem, step0: int, n: int, stride: int
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns (frame steps, frame lp, frame lt, chain states per step, well accumulators)."""
        r1 = self.thermo_rng.standard_normal(n)
        snoise = self.thermo_rng.chisquare(self.nf - 1, n) if self.nf > 1 else np.zeros(n)
        paths = np.zeros((len(self.chains), n + 1), dtype=np.int64)
        for k, ch in enumerate(self.chains):
            paths[k] = chain_path(ch, n, self.config.dt, self.chain_rng)
        n_sites = self.system.n_sites
        n_frames = _frames_in(step0, n, stride)
        frame_lp = np.zeros((n_frames, n_sites))
        frame_lt = np.zeros((n_frames, n_sites))
        frame_step = np.zeros(n_frames, dtype=np.int64)
        acc = np.zeros((n_sites, 4))
        s = self.state
        written, failed = kernels.integrate_chunk(
            s.lambda_p, s.lambda_t, s.vel_p, s.vel_t, self.system.masses, packed.active_p, packed.has_t,
            packed.poly, packed.dg, packed.sx, packed.sc, packed.se, packed.wall_k, packed.g_taut,
            packed.w, packed.J, packed.chain_shift, paths,
            step0, stride, self.config.dt, self.kt, self.c_thermo, self.thermo_on, r1, snoise,
            frame_lp, frame_lt, frame_step, acc,
        )
        if failed >= 0:
            logger.error("lambda dynamics diverged at step {} (|lambda| > {})", failed, kernels.DIVERGENCE_LIMIT)
            raise IntegrationDivergedError(
                f"lambda left the confined range at step {failed}", step=int(failed)
            )
        if written != n_frames:
            raise RuntimeError(f"kernel wrote {written} frames, expected {n_frames}")
        return frame_step, frame_lp, frame_lt, paths, acc


def initial_state(system: LambdaSystem, temperature: float, rng: np.random.Generator) -> LambdaState:
    n = system.n_sites
    lp = np.full(n, 0.5)
    for i, st in system.fixed.items():
        lp[i] = float(st)
    has_t = system.has_t
    lt = np.where(has_t, 0.5, 0.0)
    sd = np.sqrt(kt(temperature) / system.masses)
    vp = np.where(system.active_p, rng.standard_normal(n) * sd, 0.0)
    vt = np.where(has_t, rng.standard_normal(n) * sd, 0.0)
    return LambdaState(lp, lt, vp, vt)


def run_replica(
    system: LambdaSystem,
    pH: float,
    config: RunConfig,
    replica: int = 0,
    dbo: Optional[DboSettings] = None,
    equilibration_ps: float = 50.0,
    equilibration_barrier: float = 1.0,
) -> LambdaTrajectory:
    """Equilibrate at a low barrier, then produce `config.n_steps` steps at pH with optional DBO."""
    temperature = config.temperature
    streams = cell_seed_sequence(config.seed, replica, pH).spawn(4)
    init_rng, thermo_rng, chain_rng, feat_rng = (np.random.Generator(np.random.PCG64(s)) for s in streams)
    state = initial_state(system, temperature, init_rng)
    chains = [copy.deepcopy(c) for c in system.env.chains]
    seg = _Segment(system, config, state, chains, thermo_rng, chain_rng)
    n = system.n_sites
    dt = config.dt
    stride = config.output_stride

    # Equilibration: low barrier everywhere, no frames, no controllers
    eq_steps = int(round(equilibration_ps / dt))
    if eq_steps > 0:
        eq_sites = [correct_site(_with_barriers(s, equilibration_barrier), pH, temperature) for s in system.sites]
        packed = pack_system(system, eq_sites, pH, temperature)
        done = 0
        while done < eq_steps:
            k = min(DEFAULT_CHUNK, eq_steps - done)
            seg.run(packed, 1 + done, k, eq_steps + 2)
            done += k
        logger.debug("pH {} replica {}: equilibrated {} steps", pH, replica, eq_steps)

    controllers: Dict[int, SiteController] = {}
    sites = list(system.sites)
    if dbo is not None:
        for i, s in enumerate(sites):
            if i in system.fixed:
                continue
            controllers[i] = SiteController.for_site(s, dbo)
            sites[i] = controllers[i].clamp_barriers(s)
    sites = [correct_site(s, pH, temperature) for s in sites]
    packed = pack_system(system, sites, pH, temperature)

    well_block = int(round(dbo.well_block_ps / dt)) if dbo is not None else 0
    barrier_block = int(round(dbo.barrier_block_ps / dt)) if dbo is not None else 0
    steps_out: List[np.ndarray] = []
    lp_out: List[np.ndarray] = []
    lt_out: List[np.ndarray] = []
    feat_out: List[np.ndarray] = []
    events: List[ControllerEvent] = []
    adjust_times: Dict[int, List[float]] = {i: [] for i in range(n)}
    well_acc = np.zeros((n, 4))
    well_n = 0

    done = 0
    total = config.n_steps
    while done < total:
        end = min(total, done + DEFAULT_CHUNK)
        if controllers:
            for block in (well_block, barrier_block):
                if block > 0:
                    end = min(end, (done // block + 1) * block)
        k = end - done
        fsteps, flp, flt, paths, acc = seg.run(packed, done, k, stride)
        steps_out.append(fsteps)
        lp_out.append(flp)
        lt_out.append(flt)
        if chains and fsteps.size:
            idx = fsteps - done
            feat_out.append(
                np.concatenate([ch.emit(paths[c, idx], feat_rng) for c, ch in enumerate(chains)], axis=1)
            )
        done = end

        if controllers:
            well_acc += acc
            well_n += k
            t_now = done * dt
            changed = False
            for i, ctl in controllers.items():
                ctl.add_frames(flp[:, i], flt[:, i])
                site_events: List[ControllerEvent] = []
                if well_block and done % well_block == 0:
                    stats = WellBlockStats(
                        well_n, int(well_acc[i, 0]), float(well_acc[i, 1]), int(well_acc[i, 2]), float(well_acc[i, 3])
                    )
                    sites[i], evs = ctl.end_well_block(stats, sites[i], t_now)
                    site_events += evs
                if barrier_block and done % barrier_block == 0:
                    sites[i], evs = ctl.end_barrier_block(sites[i], t_now)
                    site_events += evs
                if site_events:
                    sites[i] = correct_site(sites[i], pH, temperature)
                    adjust_times[i].append(t_now)
                    events += site_events
                    changed = True
            if changed:
                packed = pack_system(system, sites, pH, temperature)
            if well_block and done % well_block == 0:
                well_acc[:] = 0.0
                well_n = 0

    steps = np.concatenate(steps_out) if steps_out else np.zeros(0, dtype=np.int64)
    lp_all = np.concatenate(lp_out) if lp_out else np.zeros((0, n))
    lt_all = np.concatenate(lt_out) if lt_out else np.zeros((0, n))
    times = steps * dt
    censored = np.zeros((steps.size, n), dtype=bool)
    if dbo is not None:
        for i, ts in adjust_times.items():
            censored[:, i] = censor_window(times, ts, dbo.censor_ps)
    features = np.concatenate(feat_out) if feat_out else None
    total_charge = system.charges.totals(lp_all) if system.charges is not None else None

    final = [
        LambdaSite(
            site_id=s.site_id,
            lambda_p=float(state.lambda_p[i]),
            lambda_t=float(state.lambda_t[i]),
            vel_p=float(state.vel_p[i]),
            vel_t=float(state.vel_t[i]),
            mass=float(system.masses[i]),
            pka_ref_macro=s.pka,
            pka_ref_delta=s.pka_delta,
            pka_ref_eps=s.pka_eps,
        )
        for i, s in enumerate(sites)
    ]
    logger.info(
        "pH {} replica {}: {} frames, {} controller events", pH, replica, steps.size, len(events)
    )
    return LambdaTrajectory(
        site_ids=system.site_ids,
        pH=pH,
        replica=replica,
        dt=dt,
        steps=steps,
        lambda_p=lp_all,
        lambda_t=lt_all,
        censored=censored,
        features=features,
        total_charge=total_charge,
        events=events,
        final_state=final,
    )
