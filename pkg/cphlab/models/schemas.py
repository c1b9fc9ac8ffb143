"""
Goal: Pydantic models for every file-level contract: run configs, experiment
specs, calibration specs and the JSON reports we write.
We keep them boring on purpose so they're stable contracts.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cphlab.models.units import macro_pka


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# -----------------------
# Run-level configuration
# -----------------------
class RunConfig(_Strict):
    dt: float = Field(0.002, gt=0, description="ps")
    temperature: float = Field(300.0, gt=0, description="K")
    thermostat_tau: float = Field(1.0, gt=0, description="ps; inf disables the thermostat")
    output_stride: int = Field(250, ge=1, description="steps between frames")
    seed: int = Field(0, ge=0, lt=2**64)
    n_steps: int = Field(0, ge=0)
    pH: float = 7.0

    @property
    def stride_ps(self) -> float:
        return self.dt * self.output_stride


class DboSettings(_Strict):
    wells: bool = True
    barriers: bool = True
    well_block_ps: float = Field(40.0, gt=0)
    well_residency: float = Field(0.70, gt=0, lt=1)
    near_low: float = 0.2
    near_high: float = 0.8
    mean_tolerance: float = Field(0.03, ge=0)
    shift_gain: float = Field(0.5, gt=0)
    shift_cap: float = Field(0.08, ge=0)
    barrier_block_ps: float = Field(1000.0, gt=0)
    transition_low: float = 0.2
    transition_high: float = 0.8
    transition_target: float = Field(0.25, ge=0, le=1)
    transition_tolerance: float = Field(0.05, ge=0)
    barrier_step: float = Field(1.0, gt=0)
    barrier_min: float = Field(1.0, ge=0)
    barrier_max: float = Field(20.0, gt=0)
    censor_ps: float = Field(10.0, ge=0)

    @model_validator(mode="after")
    def _bounds(self) -> "DboSettings":
        if self.barrier_min > self.barrier_max:
            raise ValueError("barrier_min must not exceed barrier_max")
        if not self.near_low < self.near_high:
            raise ValueError("near_low must be below near_high")
        return self


# -----------------------
# System definition
# -----------------------
class SiteSpec(_Strict):
    id: str = Field(pattern=r"^[A-Za-z0-9_.\-]+$")
    pka: float
    pka_delta: Optional[float] = None
    pka_eps: Optional[float] = None
    mass: float = Field(60.0, gt=0, description="u")
    shift: float = Field(0.0, description="linear environment shift w, kJ/mol")
    q_prot: float = 0.0
    q_deprot: float = -1.0
    barrier: float = Field(6.0, ge=0)
    barrier_t: float = Field(6.0, ge=0)
    wall_height: float = Field(30.0, gt=0)
    wall_stiffness: float = Field(1.0e6, ge=0)
    vmm: Optional[str] = Field(None, description="calibration polynomial JSON, relative to the spec file")
    reference: Optional[List[List[float]]] = Field(None, description="U_ref polynomial coefficients")

    @model_validator(mode="after")
    def _tautomers(self) -> "SiteSpec":
        if (self.pka_delta is None) != (self.pka_eps is None):
            raise ValueError("pka_delta and pka_eps must be given together")
        if self.pka_delta is not None and self.pka_eps is not None:
            implied = macro_pka(self.pka_delta, self.pka_eps)
            if abs(implied - self.pka) > 1e-3 * max(1.0, abs(self.pka)):
                raise ValueError(
                    f"site {self.id}: pka {self.pka} inconsistent with micro pKas "
                    f"(implied {implied:.4f})"
                )
        return self

    @property
    def has_tautomers(self) -> bool:
        return self.pka_delta is not None


class LambdaSite(BaseModel):
    """Snapshot of one site's lambda coordinates (velocities in 1/ps)."""

    model_config = ConfigDict(frozen=True)

    site_id: str
    lambda_p: float
    lambda_t: float = 0.0
    vel_p: float = 0.0
    vel_t: float = 0.0
    mass: float = Field(60.0, gt=0)
    pka_ref_macro: float
    pka_ref_delta: Optional[float] = None
    pka_ref_eps: Optional[float] = None

    @property
    def has_tautomers(self) -> bool:
        return self.pka_ref_delta is not None


class CouplingSpec(_Strict):
    a: str
    b: str
    j: float = Field(description="kJ/mol, added as J*lambda_a*lambda_b")

    @model_validator(mode="after")
    def _distinct(self) -> "CouplingSpec":
        if self.a == self.b:
            raise ValueError("a coupling needs two different sites")
        return self


class LatentChainSpec(_Strict):
    k01: float = Field(ge=0, description="1/ps, state 0 -> 1")
    k10: float = Field(ge=0, description="1/ps, state 1 -> 0")
    shift0: Dict[str, float] = Field(default_factory=dict)
    shift1: Dict[str, float] = Field(default_factory=dict)
    mu0: List[float]
    mu1: List[float]
    sigma: float = Field(0.1, ge=0)
    initial_state: int = Field(0, ge=0, le=1)

    @model_validator(mode="after")
    def _emitter(self) -> "LatentChainSpec":
        if len(self.mu0) < 2 or len(self.mu0) != len(self.mu1):
            raise ValueError("mu0 and mu1 need the same dimension, at least 2")
        return self


class ExperimentSpec(_Strict):
    name: str = "experiment"
    sites: List[SiteSpec] = Field(min_length=1)
    couplings: List[CouplingSpec] = Field(default_factory=list)
    latent_chains: List[LatentChainSpec] = Field(default_factory=list)
    ph_values: Optional[List[float]] = None
    replicas: int = Field(3, ge=1)
    dbo: bool = True
    dbo_settings: DboSettings = Field(default_factory=DboSettings)
    equilibration_ps: float = Field(50.0, ge=0)
    equilibration_barrier: float = Field(1.0, ge=0)
    fixed_protonation: Dict[str, int] = Field(
        default_factory=dict, description="site -> 0/1, holds lambda_p in one state"
    )
    run: RunConfig = Field(default_factory=RunConfig)

    @field_validator("ph_values")
    @classmethod
    def _ph_sorted(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is None:
            return v
        if not v:
            raise ValueError("ph_values must not be empty")
        if any(not math.isfinite(x) for x in v):
            raise ValueError("ph_values must be finite")
        return sorted(set(v))

    @model_validator(mode="after")
    def _references(self) -> "ExperimentSpec":
        ids = [s.id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise ValueError("site ids must be unique")
        known = set(ids)
        seen = set()
        for c in self.couplings:
            for name in (c.a, c.b):
                if name not in known:
                    raise ValueError(f"coupling refers to unknown site {name!r}")
            key = frozenset((c.a, c.b))
            if key in seen:
                raise ValueError(f"duplicate coupling {c.a}-{c.b}")
            seen.add(key)
        for chain in self.latent_chains:
            for name in list(chain.shift0) + list(chain.shift1):
                if name not in known:
                    raise ValueError(f"latent chain refers to unknown site {name!r}")
        for name, state in self.fixed_protonation.items():
            if name not in known:
                raise ValueError(f"fixed_protonation refers to unknown site {name!r}")
            if state not in (0, 1):
                raise ValueError("fixed_protonation values are 0 (protonated) or 1 (deprotonated)")
        return self

    @property
    def site_ids(self) -> Tuple[str, ...]:
        return tuple(s.id for s in self.sites)

    def ph_grid(self) -> List[float]:
        """Explicit pH values, or pKa_ref +/- 1 (rounded out to half units) in 0.5 steps."""
        if self.ph_values is not None:
            return list(self.ph_values)
        pkas = [s.pka for s in self.sites]
        lo = math.floor((min(pkas) - 1.0) * 2.0) / 2.0
        hi = math.ceil((max(pkas) + 1.0) * 2.0) / 2.0
        n = int(round((hi - lo) / 0.5)) + 1
        return [round(lo + 0.5 * k, 10) for k in range(n)]


class CalibrationSpec(_Strict):
    reference: List[List[float]] = Field(description="U_ref coefficients c[i][j] * lp^i * lt^j")
    sigma: float = Field(0.0, ge=0, description="per-sample noise, kJ/mol")
    n_samples: int = Field(100, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    replicas: int = Field(1, ge=1)
    degree: int = Field(5, ge=1)

    @field_validator("reference")
    @classmethod
    def _rect(cls, v: List[List[float]]) -> List[List[float]]:
        arr = np.asarray(v, dtype=float)
        if arr.ndim != 2 or arr.size == 0 or not np.all(np.isfinite(arr)):
            raise ValueError("reference must be a finite, non-empty rectangular matrix")
        return v


# -----------------------
# Reports
# -----------------------
class ErrorResponse(BaseModel):
    error: str
    message: str
    detail: Optional[str] = None


class CellFailure(BaseModel):
    pH: float
    replica: int
    error: ErrorResponse


class FitSummary(BaseModel):
    pKa: float
    hill_n: float
    sse: float
    converged: bool
    ci_lo: Optional[float] = None
    ci_hi: Optional[float] = None
    n_ci_lo: Optional[float] = None
    n_ci_hi: Optional[float] = None
    bootstrap_failures: int = 0
    unstable: bool = False


class PhPoint(BaseModel):
    pH: float
    fractions: List[float]
    mean: float
    sd: float
    transitions_per_ns: float
    in_transition: float


class SiteTitration(BaseModel):
    site: str
    hh: Optional[FitSummary] = None
    hill: Optional[FitSummary] = None
    micro_delta: Optional[FitSummary] = None
    micro_eps: Optional[FitSummary] = None
    points: List[PhPoint] = Field(default_factory=list)
    max_replica_sd: float = 0.0
    spread_replica: bool = False
    controller_events: int = 0
    errors: List[ErrorResponse] = Field(default_factory=list)


class TitrationReport(BaseModel):
    tool: str
    version: str
    spec_hash: str
    experiment: str
    dbo: bool
    ph_grid: List[float]
    replicas: int
    sites: List[SiteTitration]
    charge_drift: Optional[float] = None
    failed_cells: List[CellFailure] = Field(default_factory=list)


class PairCoupling(BaseModel):
    a: str
    b: str
    max_nmi: float
    flagged: bool
    macro_pka1: Optional[float] = None
    macro_pka2: Optional[float] = None
    coupling_free_energy: Optional[float] = None
    error: Optional[ErrorResponse] = None


class CouplingReport(BaseModel):
    tool: str
    version: str
    spec_hash: str
    sites: List[str]
    ph_grid: List[float]
    pairs: List[PairCoupling]


class FmaBin(BaseModel):
    index: int
    pKa: Optional[float] = None
    ci_lo: Optional[float] = None
    ci_hi: Optional[float] = None
    skipped: Optional[str] = None


class FmaSiteReport(BaseModel):
    site: str
    n_components: int
    r2_train: float
    r2_validation: Optional[float]
    bin_edges: List[float]
    degenerate: bool
    bins: List[FmaBin]
    low_state_mean: Optional[List[float]] = None
    high_state_mean: Optional[List[float]] = None


class FmaReport(BaseModel):
    tool: str
    version: str
    spec_hash: str
    sites: List[FmaSiteReport] = Field(default_factory=list)
    notice: Optional[str] = None
