"""Shared helpers: drive the production kernel directly, exact pair curves."""

import math

import numpy as np
import pytest

from cphlab.models.schemas import SiteSpec
from cphlab.models.units import kt
from cphlab.services import kernels
from cphlab.services.bias import SitePotential
from cphlab.services.dynamics import LambdaState, LambdaSystem, pack_system
from cphlab.services.pfc import correct_site, pair_probabilities


def run_kernel(
    system: LambdaSystem,
    state: LambdaState,
    pH: float,
    n_steps: int,
    thermo: bool = False,
    tau: float = 1.0,
    rng: np.random.Generator | None = None,
    temperature: float = 300.0,
    dt: float = 0.002,
) -> None:
    """Advance `state` in place with kernels.integrate_chunk on system.sites; no frames, no chains."""
    packed = pack_system(system, system.sites, pH, temperature)
    n = system.n_sites
    nf = int(packed.active_p.sum() + packed.has_t.sum())
    rng = rng if rng is not None else np.random.default_rng(0)
    r1 = rng.standard_normal(n_steps)
    snoise = rng.chisquare(nf - 1, n_steps) if nf > 1 else np.zeros(n_steps)
    written, failed = kernels.integrate_chunk(
        state.lambda_p, state.lambda_t, state.vel_p, state.vel_t, system.masses, packed.active_p, packed.has_t,
        packed.poly, packed.dg, packed.sx, packed.sc, packed.se, packed.wall_k, packed.g_taut,
        packed.w, packed.J, packed.chain_shift, np.zeros((0, n_steps + 1), dtype=np.int64),
        1, n_steps + 2, dt, kt(temperature), math.exp(-dt / tau), thermo, r1, snoise,
        np.zeros((0, n)), np.zeros((0, n)), np.zeros(0, dtype=np.int64), np.zeros((n, 4)),
    )
    assert (written, failed) == (0, -1)


def kinetic(system: LambdaSystem, state: LambdaState) -> float:
    k = kernels.kinetic_energy(state.vel_p, system.masses, system.active_p)
    return k + kernels.kinetic_energy(state.vel_t, system.masses, system.has_t)


@pytest.fixture
def kernel_run():
    return run_kernel


@pytest.fixture
def kernel_kinetic():
    return kinetic


def pair_protons_bound(a: SiteSpec, b: SiteSpec, j: float, ph_values, temperature: float = 300.0) -> np.ndarray:
    """<X> = 2 - P(a deprot) - P(b deprot) by quadrature over the corrected sites."""
    pa = SitePotential.from_spec(a)
    pb = SitePotential.from_spec(b)
    out = []
    for ph in ph_values:
        table = pair_probabilities(
            correct_site(pa, ph, temperature), correct_site(pb, ph, temperature), j, ph, temperature
        )
        out.append(2.0 - table[1].sum() - table[:, 1].sum())
    return np.array(out)


@pytest.fixture
def pair_oracle():
    return pair_protons_bound
