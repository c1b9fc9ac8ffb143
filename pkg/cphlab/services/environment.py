"""
Goal: Synthetic protein environment for the lambda particles.

- linear shifts w_i * lp_i and pairwise couplings J_ij * lp_i * lp_j
- two-state latent "conformation" chains with exponential clocks; each state
  shifts some sites and emits a noisy feature vector at every frame
- a charge ledger that pairs every site with a buffer of opposite charge change
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from cphlab.models.errors import InvalidInputError
from cphlab.models.schemas import ExperimentSpec, LatentChainSpec

BUFFER_Q0 = -0.834


@dataclass
class LatentChain:
    """Two-state Markov process; `clock` is the time left until the next switch."""

    k01: float
    k10: float
    mu0: np.ndarray
    mu1: np.ndarray
    sigma: float
    state: int = 0
    clock: float = math.nan

    @classmethod
    def from_spec(cls, spec: LatentChainSpec) -> "LatentChain":
        return cls(
            k01=spec.k01,
            k10=spec.k10,
            mu0=np.asarray(spec.mu0, dtype=float),
            mu1=np.asarray(spec.mu1, dtype=float),
            sigma=spec.sigma,
            state=spec.initial_state,
        )

    @property
    def dim(self) -> int:
        return int(self.mu0.shape[0])

    def rate(self, state: int) -> float:
        return self.k01 if state == 0 else self.k10

    def _draw_clock(self, rng: np.random.Generator) -> float:
        r = self.rate(self.state)
        return float(rng.exponential(1.0 / r)) if r > 0 else math.inf

    def emit(self, states: np.ndarray | int, rng: np.random.Generator) -> np.ndarray:
        s = np.asarray(states)
        means = np.where(s[..., None] == 1, self.mu1, self.mu0)
        return means + self.sigma * rng.standard_normal(means.shape)


def advance_latent_chain(chain: LatentChain, dt: float, rng: np.random.Generator) -> Tuple[int, np.ndarray]:
    """Move the chain forward by dt (exact, any number of switches) and emit one feature vector."""
    if chain.k01 < 0 or chain.k10 < 0:
        raise InvalidInputError("latent chain rates must be >= 0")
    if math.isnan(chain.clock):
        chain.clock = chain._draw_clock(rng)
    remaining = dt
    while chain.clock <= remaining:
        remaining -= chain.clock
        chain.state = 1 - chain.state
        chain.clock = chain._draw_clock(rng)
    chain.clock -= remaining
    return chain.state, chain.emit(chain.state, rng)


def chain_path(chain: LatentChain, n_steps: int, dt: float, rng: np.random.Generator) -> np.ndarray:
    """States at t = 0, dt, ..., n_steps*dt using the same exponential clock; advances the chain."""
    if math.isnan(chain.clock):
        chain.clock = chain._draw_clock(rng)
    horizon = n_steps * dt
    switch_times: List[float] = []
    t = chain.clock
    state = chain.state
    while t <= horizon:
        switch_times.append(t)
        state = 1 - state
        r = chain.rate(state)
        t += float(rng.exponential(1.0 / r)) if r > 0 else math.inf
    times = np.arange(n_steps + 1) * dt
    flips = np.searchsorted(np.asarray(switch_times), times, side="right")
    path = (chain.state + flips) % 2
    chain.state = int(state)
    chain.clock = t - horizon
    return path.astype(np.int64)


@dataclass
class EnvironmentModel:
    site_ids: Tuple[str, ...]
    w: np.ndarray
    J: np.ndarray
    chains: List[LatentChain] = field(default_factory=list)
    chain_shift: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 0)))

    def __post_init__(self) -> None:
        n = len(self.site_ids)
        if self.J.shape != (n, n) or not np.allclose(self.J, self.J.T, atol=0.0) or np.any(np.diag(self.J) != 0):
            raise InvalidInputError("J must be symmetric with a zero diagonal")
        if self.chain_shift.shape != (len(self.chains), 2, n):
            raise InvalidInputError("chain_shift must be (n_chains, 2, n_sites)")
        for ch in self.chains:
            if ch.k01 < 0 or ch.k10 < 0:
                raise InvalidInputError("latent chain rates must be >= 0")
            if ch.dim < 2:
                raise InvalidInputError("feature dimension must be >= 2")

    @classmethod
    def from_spec(cls, spec: ExperimentSpec) -> "EnvironmentModel":
        ids = spec.site_ids
        index = {s: k for k, s in enumerate(ids)}
        n = len(ids)
        w = np.array([s.shift for s in spec.sites], dtype=float)
        J = np.zeros((n, n))
        for c in spec.couplings:
            J[index[c.a], index[c.b]] = J[index[c.b], index[c.a]] = c.j
        chains = [LatentChain.from_spec(c) for c in spec.latent_chains]
        shift = np.zeros((len(chains), 2, n))
        for k, c in enumerate(spec.latent_chains):
            for name, value in c.shift0.items():
                shift[k, 0, index[name]] = value
            for name, value in c.shift1.items():
                shift[k, 1, index[name]] = value
        return cls(ids, w, J, chains, shift)

    @property
    def feature_dim(self) -> int:
        return sum(c.dim for c in self.chains)

    def energy(self, lambda_p: np.ndarray, chain_state: Optional[Sequence[int]] = None) -> float:
        lp = np.asarray(lambda_p, dtype=float)
        e = float(self.w @ lp + 0.5 * lp @ self.J @ lp)
        for k, s in enumerate(chain_state or ()):
            e += float(self.chain_shift[k, s] @ lp)
        return e


@dataclass(frozen=True)
class ChargeLedger:
    """Residue charge q_prot + (q_deprot - q_prot)*lp, buffer -0.834 - (q_deprot - q_prot)*lp."""

    q_prot: np.ndarray
    q_deprot: np.ndarray

    @classmethod
    def from_spec(cls, spec: ExperimentSpec) -> "ChargeLedger":
        return cls(
            np.array([s.q_prot for s in spec.sites], dtype=float),
            np.array([s.q_deprot for s in spec.sites], dtype=float),
        )

    def residue_charge(self, lambda_p: np.ndarray) -> np.ndarray:
        return self.q_prot + (self.q_deprot - self.q_prot) * np.asarray(lambda_p, dtype=float)

    def buffer_charge(self, lambda_p: np.ndarray) -> np.ndarray:
        return BUFFER_Q0 - (self.q_deprot - self.q_prot) * np.asarray(lambda_p, dtype=float)

    def totals(self, lambda_p: np.ndarray) -> np.ndarray:
        """Total charge per frame for a (frames, sites) lp array."""
        lp = np.atleast_2d(np.asarray(lambda_p, dtype=float))
        return (self.residue_charge(lp) + self.buffer_charge(lp)).sum(axis=1)
