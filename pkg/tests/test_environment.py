"""
Goal: The synthetic environment (shifts, couplings, latent chains, charges)
matches its closed forms.
"""

import math

import numpy as np
import pytest

from cphlab.models.errors import InvalidInputError
from cphlab.models.schemas import CouplingSpec, ExperimentSpec, LatentChainSpec, SiteSpec
from cphlab.services.environment import (
    BUFFER_Q0,
    ChargeLedger,
    EnvironmentModel,
    LatentChain,
    advance_latent_chain,
    chain_path,
)


def _chain(k01, k10, state=0):
    return LatentChain.from_spec(LatentChainSpec(k01=k01, k10=k10, mu0=[0.0, 0.0], mu1=[1.0, 2.0], initial_state=state))


def test_frozen_chain_never_switches():
    ch = _chain(0.0, 0.0, state=1)
    rng = np.random.default_rng(0)
    for _ in range(500):
        state, feat = advance_latent_chain(ch, 0.1, rng)
        assert state == 1
        assert feat.shape == (2,)
    assert np.all(chain_path(_chain(0.0, 0.0), 1000, 0.01, rng) == 0)


def test_chain_stationary_occupancy():
    ch = _chain(1.0, 3.0)
    path = chain_path(ch, 200_000, 0.01, np.random.default_rng(7))
    assert path.shape == (200_001,)
    assert path.mean() == pytest.approx(0.25, abs=0.03)


def test_chain_dwell_times_are_exponential():
    ch = _chain(2.0, 2.0)
    path = chain_path(ch, 400_000, 0.005, np.random.default_rng(3))
    flips = np.flatnonzero(np.diff(path))
    dwell = np.diff(flips) * 0.005
    assert dwell.mean() == pytest.approx(0.5, rel=0.05)


def test_chain_path_continues_from_its_state():
    rng = np.random.default_rng(1)
    ch = _chain(5.0, 5.0)
    first = chain_path(ch, 100, 0.01, rng)
    assert ch.state == first[-1]
    second = chain_path(ch, 100, 0.01, rng)
    assert second[0] == first[-1]


def test_emission_means():
    ch = _chain(1.0, 1.0)
    ch.sigma = 0.0
    out = ch.emit(np.array([0, 1, 1]), np.random.default_rng(0))
    assert out.tolist() == [[0.0, 0.0], [1.0, 2.0], [1.0, 2.0]]


def test_environment_energy_closed_form():
    spec = ExperimentSpec(
        sites=[SiteSpec(id="A", pka=4.0, shift=2.0), SiteSpec(id="B", pka=5.0, shift=-1.0)],
        couplings=[CouplingSpec(a="A", b="B", j=8.0)],
        latent_chains=[LatentChainSpec(k01=1.0, k10=1.0, shift1={"B": 4.0}, mu0=[0.0, 0.0], mu1=[1.0, 1.0])],
    )
    env = EnvironmentModel.from_spec(spec)
    lp = np.array([1.0, 0.5])
    assert env.energy(lp, [0]) == pytest.approx(2.0 - 0.5 + 8.0 * 0.5)
    assert env.energy(lp, [1]) == pytest.approx(2.0 - 0.5 + 8.0 * 0.5 + 4.0 * 0.5)
    assert env.feature_dim == 2


def test_environment_rejects_asymmetric_coupling():
    with pytest.raises(InvalidInputError):
        EnvironmentModel(("A", "B"), np.zeros(2), np.array([[0.0, 1.0], [2.0, 0.0]]))


def test_charge_ledger_balances():
    spec = ExperimentSpec(sites=[SiteSpec(id="A", pka=4.0), SiteSpec(id="K", pka=10.4, q_prot=1.0, q_deprot=0.0)])
    ledger = ChargeLedger.from_spec(spec)
    lp = np.random.default_rng(0).uniform(-0.1, 1.1, (50, 2))
    assert ledger.totals(lp) == pytest.approx(np.full(50, 1.0 + 2 * BUFFER_Q0))
    assert ledger.buffer_charge(np.array([1.0, 1.0]))[0] == pytest.approx(BUFFER_Q0 + 1.0)
    assert math.isclose(ledger.residue_charge(np.array([0.0, 0.0]))[1], 1.0)
