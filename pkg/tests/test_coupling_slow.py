"""
Goal: Sampled pairs of titrating sites: independent sites show the statistical
split and no mutual information, a repulsive pair is flagged and titrates to
the exact curve of the lambda Hamiltonian, and the sampled coupling free energy
matches the exact joint populations.
"""

import math

import numpy as np
import pytest

from cphlab.models.schemas import CouplingSpec, ExperimentSpec, RunConfig, SiteSpec
from cphlab.services.bias import SitePotential
from cphlab.services.coupling import (
    coupling_free_energy,
    coupling_screen,
    fit_macroscopic_two,
    macro_points,
    macroscopic_pkas_exact,
    pooled_counts,
)
from cphlab.services.dynamics import build_system, run_replica
from cphlab.services.pfc import correct_site, pair_probabilities
from cphlab.services.titration import TitrationDataset, fit_points

pytestmark = pytest.mark.slow


def _pair_runs(barrier, j, ph_values, replicas, n_steps, stride=250, seed=51):
    spec = ExperimentSpec(
        sites=[SiteSpec(id=s, pka=4.0, barrier=barrier, mass=5.0) for s in ("A", "B")],
        couplings=[CouplingSpec(a="A", b="B", j=j)] if j else [],
        ph_values=ph_values,
        run=RunConfig(n_steps=n_steps, output_stride=stride, seed=seed),
    )
    system = build_system(spec)
    trajs = [
        run_replica(system, ph, spec.run, replica=r, equilibration_ps=20.0)
        for ph in spec.ph_grid()
        for r in range(replicas)
    ]
    return spec, trajs


def _macro_fit(trajs):
    pts = macro_points(trajs, "A", "B")
    return fit_macroscopic_two(pts["pH"], pts["x"])


def test_uncoupled_pair_titrates_independently():
    spec, trajs = _pair_runs(1.0, 0.0, [2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5], replicas=4, n_steps=2_000_000)
    dataset = TitrationDataset.from_trajectories(trajs, spec.run.stride_ps)
    for site in ("A", "B"):
        assert fit_points(dataset.points(site), "hill").hill_n == pytest.approx(1.0, abs=0.05)
    screen = coupling_screen(trajs)
    assert screen.pairs[0].max_nmi < 0.1
    assert not screen.pairs[0].flagged
    fit = _macro_fit(trajs)
    assert fit.pka1 == pytest.approx(4.0 - math.log10(2.0), abs=0.05)
    assert fit.pka2 == pytest.approx(4.0 + math.log10(2.0), abs=0.05)


def test_repulsive_pair_is_flagged_and_follows_the_exact_curve(pair_oracle):
    ph_values = [2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5]
    _, trajs = _pair_runs(6.0, 8.0, ph_values, replicas=4, n_steps=2_000_000, seed=53)
    assert coupling_screen(trajs).pairs[0].flagged

    grid = np.linspace(2.5, 6.5, 17)
    exact = fit_macroscopic_two(grid, pair_oracle(SiteSpec(id="A", pka=4.0), SiteSpec(id="B", pka=4.0), 8.0, grid))
    assert exact.pka2 - exact.pka1 > 2.0 * math.log10(2.0) + 0.5
    # the two-state closed form overstates a lambda coupling
    assert exact.pka2 - exact.pka1 < float(np.diff(macroscopic_pkas_exact(4.0, 4.0, 8.0))[0])

    fit = _macro_fit(trajs)
    assert fit.pka1 == pytest.approx(exact.pka1, abs=0.1)
    assert fit.pka2 == pytest.approx(exact.pka2, abs=0.1)


def test_sampled_coupling_free_energy_matches_the_joint_populations():
    ph = 4.5
    _, trajs = _pair_runs(3.0, 8.0, [ph], replicas=8, n_steps=4_000_000, stride=25, seed=57)
    sampled = coupling_free_energy(pooled_counts(trajs, "A", "B", ph))

    site = SitePotential.from_spec(SiteSpec(id="A", pka=4.0, barrier=3.0, mass=5.0))
    corrected = correct_site(site, ph, 300.0)
    exact = coupling_free_energy(pair_probabilities(corrected, corrected, 8.0, ph, 300.0) * 1e7)

    assert sampled.defined and exact.defined
    assert exact.value < 0.0
    assert sampled.value == pytest.approx(exact.value, abs=0.2)
