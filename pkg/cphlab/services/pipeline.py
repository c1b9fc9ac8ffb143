"""
Goal: The file-based workflow behind the CLI.

- calibrate: TI grid -> polynomial JSON (+ per-replica fits when several)
- simulate / titrate: one cell per (pH, replica) on a process pool; a cell
  whose trajectory file exists is skipped, so reruns only fill the gaps.
  trajectories/run.json pins the dynamics settings; a rerun with other
  settings (DBO on/off, dt, sites, ...) is refused instead of mixed in
- every report is rebuilt from the files on disk, so a resumed run writes the
  same bytes as an uninterrupted one
- analyze: coupling screen + macroscopic fits + microstate shares for flagged
  pairs, and FMA (component scan, bins, extreme states) when features exist
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from cphlab import TOOL_NAME, __version__
from cphlab.adapters import reports
from cphlab.adapters.spec_file import dynamics_hash, spec_hash
from cphlab.adapters.svg_plot import titration_svg
from cphlab.adapters.trajectory_csv import (
    events_path,
    read_events,
    read_trajectory,
    run_manifest_path,
    trajectory_path,
    write_dataset,
    write_events,
    write_frame,
    write_trajectory,
)
from cphlab.models.errors import CphError, ResumeMismatchError
from cphlab.models.schemas import (
    CalibrationSpec,
    CellFailure,
    CouplingReport,
    ErrorResponse,
    ExperimentSpec,
    FmaBin,
    FmaReport,
    FmaSiteReport,
    PairCoupling,
    PhPoint,
    SiteTitration,
    TitrationReport,
)
from cphlab.services import coupling, fma, titration
from cphlab.services.bias import CalibrationPolynomial
from cphlab.services.calibration import CalibrationFit, calibrate, replica_agreement
from cphlab.services.dynamics import LambdaTrajectory, build_system, run_replica
from cphlab.settings import BOOTSTRAP_SAMPLES


@dataclass(frozen=True)
class CellOutcome:
    pH: float
    replica: int
    status: str  # done | skipped | failed
    error: Optional[Dict[str, object]] = None


def _error_path(out: Path, pH: float, replica: int) -> Path:
    return trajectory_path(out, pH, replica).with_suffix(".error.json")


# -----------------------
# Calibration
# -----------------------
def run_calibration(spec: CalibrationSpec, out: Path) -> Tuple[CalibrationFit, List[CalibrationFit]]:
    joint, per_replica = calibrate(spec)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vmm.json").write_text(joint.polynomial.model_dump_json(indent=2) + "\n", encoding="utf-8")
    summary = {
        "tool": TOOL_NAME,
        "version": __version__,
        "spec_hash": spec_hash(spec),
        "degree": spec.degree,
        "replicas": spec.replicas,
        "rms_residual": joint.rms_residual,
        "stderr": np.asarray(joint.stderr).tolist(),
        "replica_max_z": replica_agreement(per_replica) if len(per_replica) > 1 else None,
    }
    (out / "calibration.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("calibration written to {} (rms residual {:.3g})", out, joint.rms_residual)
    return joint, per_replica


# -----------------------
# Cells
# -----------------------
def run_cell(
    spec: ExperimentSpec,
    vmm: Dict[str, CalibrationPolynomial],
    out: Path,
    pH: float,
    replica: int,
) -> CellOutcome:
    """Run one (pH, replica) cell unless its trajectory is already on disk."""
    path = trajectory_path(out, pH, replica)
    err_path = _error_path(out, pH, replica)
    if path.exists():
        logger.info("cell pH {:.2f} replica {}: trajectory present, skipped", pH, replica)
        return CellOutcome(pH, replica, "skipped")
    logger.info("cell pH {:.2f} replica {}: start", pH, replica)
    system = build_system(spec, vmm)
    try:
        traj = run_replica(
            system,
            pH,
            spec.run,
            replica=replica,
            dbo=spec.dbo_settings if spec.dbo else None,
            equilibration_ps=spec.equilibration_ps,
            equilibration_barrier=spec.equilibration_barrier,
        )
    except CphError as e:
        logger.warning("cell pH {:.2f} replica {}: {} ({})", pH, replica, e.message, e.code)
        err_path.parent.mkdir(parents=True, exist_ok=True)
        err_path.write_text(json.dumps(e.as_dict(), sort_keys=True) + "\n", encoding="utf-8")
        return CellOutcome(pH, replica, "failed", e.as_dict())
    write_events(traj.events, events_path(out, pH, replica))
    write_trajectory(traj, path)
    err_path.unlink(missing_ok=True)
    logger.info("cell pH {:.2f} replica {}: done, {} frames", pH, replica, traj.n_frames)
    return CellOutcome(pH, replica, "done")


def cells(spec: ExperimentSpec) -> List[Tuple[float, int]]:
    return list(itertools.product(spec.ph_grid(), range(spec.replicas)))


def check_run_manifest(spec: ExperimentSpec, out: Path) -> None:
    """Write trajectories/run.json, or refuse to resume into a directory run with other dynamics."""
    path = run_manifest_path(out)
    manifest = {"tool": TOOL_NAME, "dbo": spec.dbo, "dynamics_hash": dynamics_hash(spec)}
    if path.exists():
        old = json.loads(path.read_text("utf-8"))
        if old.get("dynamics_hash") == manifest["dynamics_hash"]:
            return
        what = "DBO setting" if old.get("dbo") != spec.dbo else "dynamics settings"
        raise ResumeMismatchError(
            f"{out} holds trajectories run with a different {what}; use a new output directory",
            detail=f"on disk {old.get('dynamics_hash')} (dbo={old.get('dbo')}), "
            f"requested {manifest['dynamics_hash']} (dbo={spec.dbo})",
        )
    if any(path.parent.glob("ph_*/replica_*.csv")):
        raise ResumeMismatchError(f"{out} holds trajectories without {path.name}; use a new output directory")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_cells(
    spec: ExperimentSpec,
    vmm: Dict[str, CalibrationPolynomial],
    out: Path,
    jobs: int = 1,
    todo: Optional[Sequence[Tuple[float, int]]] = None,
) -> List[CellOutcome]:
    check_run_manifest(spec, out)
    todo = list(todo) if todo is not None else cells(spec)
    if jobs <= 1 or len(todo) <= 1:
        return [run_cell(spec, vmm, out, ph, r) for ph, r in todo]
    outcomes: List[CellOutcome] = []
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {pool.submit(run_cell, spec, vmm, out, ph, r): (ph, r) for ph, r in todo}
        for fut in as_completed(futures):
            outcomes.append(fut.result())
    return sorted(outcomes, key=lambda o: (o.pH, o.replica))


def load_trajectories(spec: ExperimentSpec, out: Path) -> List[LambdaTrajectory]:
    trajs = []
    for ph, r in cells(spec):
        path = trajectory_path(out, ph, r)
        if path.exists():
            traj = read_trajectory(path, ph, r, spec.run.dt)
            traj.events = read_events(events_path(out, ph, r))
            trajs.append(traj)
    return trajs


def failed_cells(spec: ExperimentSpec, out: Path) -> List[CellFailure]:
    failures = []
    for ph, r in cells(spec):
        p = _error_path(out, ph, r)
        if p.exists() and not trajectory_path(out, ph, r).exists():
            failures.append(CellFailure(pH=ph, replica=r, error=ErrorResponse(**json.loads(p.read_text("utf-8")))))
    return failures


# -----------------------
# Titration report
# -----------------------
def _with_min_replicas(points: pd.DataFrame, minimum: int) -> pd.DataFrame:
    counts = points.groupby("pH")["fraction"].transform("size")
    dropped = sorted(set(points.loc[counts < minimum, "pH"]))
    if dropped:
        logger.warning("pH {} left out of the fit: fewer than {} replicas", dropped, minimum)
    return points[counts >= minimum].reset_index(drop=True)


def site_titration(
    dataset: titration.TitrationDataset,
    site: str,
    replicas: int,
    n_boot: int,
    seed: int,
    has_tautomers: bool,
    fixed: bool = False,
) -> SiteTitration:
    st = SiteTitration(site=site)
    try:
        pts = dataset.points(site)
    except CphError as e:
        st.errors.append(ErrorResponse(**e.as_dict()))
        return st
    summary = titration.ph_summary(dataset, site)
    for row in summary.itertuples():
        fr = pts.loc[pts["pH"] == row.pH, "fraction"].tolist()
        st.points.append(
            PhPoint(
                pH=float(row.pH),
                fractions=[float(x) for x in fr],
                mean=float(row.mean),
                sd=float(row.sd),
                transitions_per_ns=float(row.transitions_per_ns),
                in_transition=float(row.in_transition),
            )
        )
    st.max_replica_sd, st.spread_replica = titration.is_spread_replica(pts)
    if fixed:
        return st

    usable = _with_min_replicas(pts, 2) if replicas >= 2 else pts
    for kind in ("hh", "hill"):
        try:
            fit = titration.fit_points(usable, kind)  # type: ignore[arg-type]
            summary_fit = fit.summary()
            if replicas >= 2:
                boot = titration.bootstrap_ci(usable, kind, n_boot, seed)  # type: ignore[arg-type]
                summary_fit = boot.summary(fit)
            setattr(st, kind, summary_fit)
        except CphError as e:
            logger.warning("site {} {} fit: {}", site, kind, e.message)
            st.errors.append(ErrorResponse(**e.as_dict()))
    if has_tautomers:
        try:
            d, e_ = titration.micro_pkas(dataset, site)
            st.micro_delta, st.micro_eps = d.summary(), e_.summary()
        except CphError as e:
            st.errors.append(ErrorResponse(**e.as_dict()))
    return st


def build_titration(
    spec: ExperimentSpec,
    out: Path,
    n_boot: int = BOOTSTRAP_SAMPLES,
    plots: bool = True,
) -> TitrationReport:
    trajs = load_trajectories(spec, out)
    dataset = titration.TitrationDataset.from_trajectories(trajs, spec.run.stride_ps)
    write_dataset(dataset, out / "dataset.csv")
    site_specs = {s.id: s for s in spec.sites}
    report = TitrationReport(
        tool=TOOL_NAME,
        version=__version__,
        spec_hash=spec_hash(spec),
        experiment=spec.name,
        dbo=spec.dbo,
        ph_grid=spec.ph_grid(),
        replicas=spec.replicas,
        sites=[
            site_titration(
                dataset,
                sid,
                spec.replicas,
                n_boot,
                spec.run.seed,
                site_specs[sid].has_tautomers,
                fixed=sid in spec.fixed_protonation,
            )
            for sid in spec.site_ids
        ],
        charge_drift=max((t.charge_drift for t in trajs if t.total_charge is not None), default=None),
        failed_cells=failed_cells(spec, out),
    )
    for st in report.sites:
        st.controller_events = sum(e.site == st.site for t in trajs for e in t.events)
    reports.write_json(report, out / "report.json")
    reports.write_titration_csv(report, out / "titration.csv")
    if plots:
        for st in report.sites:
            try:
                pts = dataset.points(st.site)
            except CphError:
                continue
            fit = None
            if st.hill is not None:
                fit = titration.FitResult(st.hill.pKa, st.hill.hill_n, st.hill.sse, st.hill.converged)
            elif st.hh is not None:
                fit = titration.FitResult(st.hh.pKa, 1.0, st.hh.sse, st.hh.converged)
            titration_svg(st.site, pts, fit, out / "plots" / f"{st.site}.svg")
    return report


def titrate(
    spec: ExperimentSpec,
    vmm: Dict[str, CalibrationPolynomial],
    out: Path,
    jobs: int = 1,
    n_boot: int = BOOTSTRAP_SAMPLES,
) -> TitrationReport:
    outcomes = run_cells(spec, vmm, out, jobs)
    failed = [o for o in outcomes if o.status == "failed"]
    if failed:
        logger.warning("{} of {} cells failed", len(failed), len(outcomes))
    return build_titration(spec, out, n_boot)


# -----------------------
# Analysis
# -----------------------
def build_coupling(spec: ExperimentSpec, trajs: Sequence[LambdaTrajectory]) -> Tuple[CouplingReport, Optional[pd.DataFrame]]:
    base = dict(tool=TOOL_NAME, version=__version__, spec_hash=spec_hash(spec), sites=list(spec.site_ids), ph_grid=spec.ph_grid())
    if len(spec.sites) < 2 or not trajs:
        return CouplingReport(pairs=[], **base), None
    screen = coupling.coupling_screen(trajs)
    pairs = []
    for p in screen.pairs:
        pc = PairCoupling(a=p.a, b=p.b, max_nmi=p.max_nmi, flagged=p.flagged)
        if p.flagged and p.flag_ph is not None:
            try:
                mp = coupling.macro_points(trajs, p.a, p.b)
                mf = coupling.fit_macroscopic_two(mp["pH"], mp["x"])
                pc.macro_pka1, pc.macro_pka2 = mf.pka1, mf.pka2
                dg = coupling.coupling_free_energy(
                    coupling.pooled_counts(trajs, p.a, p.b, p.flag_ph), temperature=spec.run.temperature
                )
                pc.coupling_free_energy = dg.value
                if not dg.defined:
                    pc.error = ErrorResponse(error="undefined", message=dg.reason or "undefined")
            except CphError as e:
                pc.error = ErrorResponse(**e.as_dict())
        pairs.append(pc)
    return CouplingReport(pairs=pairs, **base), screen.nmi_matrix()


def build_fma(
    spec: ExperimentSpec,
    trajs: Sequence[LambdaTrajectory],
    out: Path,
    n_components: int = 20,
    n_boot: int = BOOTSTRAP_SAMPLES,
) -> FmaReport:
    report = FmaReport(tool=TOOL_NAME, version=__version__, spec_hash=spec_hash(spec))
    if not any(t.features is not None for t in trajs):
        report.notice = "no feature columns in the trajectories; FMA skipped"
        logger.info(report.notice)
        return report
    for site in spec.site_ids:
        if site in spec.fixed_protonation:
            continue
        try:
            frames, X = fma.fma_frames(trajs, site)
            model = fma.pls_fit(X, frames["lambda_p"].to_numpy(), n_components, frames["replica"], spec.run.seed)
        except CphError as e:
            logger.warning("fma {}: {}", site, e.message)
            continue
        site_dir = out / "analysis" / "fma" / site
        scan = fma.pls_component_scan(X, frames["lambda_p"].to_numpy(), frames["replica"], model.n_components, spec.run.seed)
        write_frame(scan, site_dir / "components.csv")
        frames = frames.assign(fma=fma.project(model, X))
        for r, sub in frames.groupby("replica", sort=True):
            write_frame(sub[["pH", "step", "lambda_p", "fma"]], site_dir / f"replica_{int(r):03d}.csv")
        try:
            binning = fma.percentile_bins(frames["fma"])
        except CphError as e:
            logger.warning("fma {}: {}", site, e.message)
            continue
        try:
            low, high = fma.extreme_state_means(binning, frames["fma"], X)
            low_mean, high_mean = [float(v) for v in low], [float(v) for v in high]
        except CphError as e:
            logger.warning("fma {}: {}", site, e.message)
            low_mean = high_mean = None
        bins = []
        for b in fma.binned_titration(binning, frames, n_boot, spec.run.seed):
            bins.append(
                FmaBin(
                    index=b.index,
                    pKa=b.fit.pKa if b.fit else None,
                    ci_lo=b.ci.ci_lo if b.ci else None,
                    ci_hi=b.ci.ci_hi if b.ci else None,
                    skipped=b.skipped,
                )
            )
        report.sites.append(
            FmaSiteReport(
                site=site,
                n_components=model.n_components,
                r2_train=model.r2_train,
                r2_validation=model.r2_validation,
                bin_edges=list(binning.edges),
                degenerate=binning.degenerate,
                bins=bins,
                low_state_mean=low_mean,
                high_state_mean=high_mean,
            )
        )
    return report


def analyze(spec: ExperimentSpec, out: Path, n_boot: int = BOOTSTRAP_SAMPLES) -> Tuple[CouplingReport, FmaReport]:
    trajs = load_trajectories(spec, out)
    cp, matrix = build_coupling(spec, trajs)
    analysis = out / "analysis"
    reports.write_json(cp, analysis / "coupling.json")
    if matrix is not None:
        write_frame(matrix.reset_index().rename(columns={"index": "site"}), analysis / "nmi_matrix.csv")
    for pair in cp.pairs:
        if pair.flagged:
            write_frame(coupling.microstate_fractions(trajs, pair.a, pair.b), analysis / "microstates" / f"{pair.a}_{pair.b}.csv")
    fm = build_fma(spec, trajs, out, n_boot=n_boot)
    reports.write_json(fm, analysis / "fma.json")
    return cp, fm
