"""
Goal: Feature vectors emitted by a latent two-state environment explain the
sampled lambda_p, and the extreme FMA bins titrate with the pKa of each
environment state.
"""

import numpy as np
import pytest
from scipy.optimize import brentq

from cphlab.models.schemas import ExperimentSpec, LatentChainSpec, RunConfig, SiteSpec
from cphlab.services.bias import SitePotential
from cphlab.services.dynamics import build_system, run_replica
from cphlab.services.fma import binned_titration, fma_frames, percentile_bins, pls_fit, project
from cphlab.services.pfc import correct_site, site_probabilities

pytestmark = pytest.mark.slow

SITE = SiteSpec(id="E", pka=4.0, barrier=3.0, mass=5.0)


def _state_shift(target_pka):
    """Latent shift that puts the corrected site half deprotonated at target_pka."""
    site = correct_site(SitePotential.from_spec(SITE), target_pka, 300.0)
    return brentq(lambda c: site_probabilities(site, target_pka, 300.0, extra_shift=c)[0] - 0.5, -20.0, 30.0)


def _chain_runs(chain, ph_values, replicas, n_steps, seed):
    spec = ExperimentSpec(
        sites=[SITE],
        latent_chains=[chain],
        ph_values=ph_values,
        run=RunConfig(n_steps=n_steps, output_stride=250, seed=seed),
    )
    system = build_system(spec)
    trajs = [
        run_replica(system, ph, spec.run, replica=r, equilibration_ps=20.0)
        for ph in spec.ph_grid()
        for r in range(replicas)
    ]
    return fma_frames(trajs, "E")


def test_features_of_a_strongly_split_environment_explain_lambda():
    # one state pins the site deprotonated, the other protonated
    chain = LatentChainSpec(
        k01=0.01, k10=0.01, shift0={"E": -30.0}, shift1={"E": 30.0}, mu0=[0.0] * 4, mu1=[1.0] * 4, sigma=0.1
    )
    frames, X = _chain_runs(chain, [4.0], replicas=5, n_steps=1_000_000, seed=61)
    model = pls_fit(X, frames["lambda_p"].to_numpy(), 2, frames["replica"].to_numpy())
    assert model.validation_groups
    assert model.r2_validation >= 0.5


def test_extreme_fma_bins_recover_the_per_state_pkas():
    shift = _state_shift(5.5)
    assert shift > 0.0
    chain = LatentChainSpec(k01=0.004, k10=0.004, shift1={"E": shift}, mu0=[0.0] * 4, mu1=[1.0] * 4, sigma=0.1)
    frames, X = _chain_runs(chain, list(np.arange(3.0, 6.51, 0.5)), replicas=3, n_steps=2_000_000, seed=67)
    model = pls_fit(X, frames["lambda_p"].to_numpy(), 2, frames["replica"].to_numpy())
    assert model.r2_validation > 0.05

    fma = project(model, X)
    binning = percentile_bins(fma)
    bins = binned_titration(binning, frames.assign(fma=fma), n_boot=200)
    low, high = bins[0], bins[-1]
    assert low.fit is not None and high.fit is not None
    # the deprotonation-favouring state sits at the high end of the projection
    assert high.fit.pKa == pytest.approx(4.0, abs=0.15)
    assert low.fit.pKa == pytest.approx(5.5, abs=0.15)
