r"""
Goal: Friendly, typed CLI for cphlab.

- Export `app` (tests import this).
- Show "Constant-pH lambda-dynamics toolkit" in --help output.
- Exit codes: 0 ok, 1 user error (bad spec, missing file, failed fit), 2 internal error.
- Summaries go to the terminal as rich tables; everything else goes to files.
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import typer
from loguru import logger
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from cphlab import settings
from cphlab.adapters.spec_file import (
    load_calibration_spec,
    load_experiment,
    load_run_config,
    load_site_polynomials,
)
from cphlab.models.errors import CphError
from cphlab.models.schemas import ExperimentSpec, TitrationReport
from cphlab.services import pipeline
from cphlab.services.logs import configure_logging

app = typer.Typer(
    help="Constant-pH lambda-dynamics toolkit",
    add_completion=False,
    no_args_is_help=True,
    rich_markup_mode="rich",
)
console = Console()


@app.callback(help="Constant-pH lambda-dynamics toolkit")
def _root_callback(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING ..."),
) -> None:
    configure_logging(level=log_level)


@contextmanager
def _handled() -> Iterator[None]:
    """Map failures to exit codes; internal errors keep their traceback in the log."""
    try:
        yield
    except typer.Exit:
        raise
    except CphError as e:
        console.print(f"[red]error[/red] ({e.code}): {e.message}")
        if getattr(e, "diagnostics", None):
            console.print(e.diagnostics)  # type: ignore[attr-defined]
        raise typer.Exit(1)
    except ValidationError as e:
        console.print(f"[red]error[/red] (invalid_input): {e}")
        raise typer.Exit(1)
    except FileNotFoundError as e:
        console.print(f"[red]error[/red] (missing_file): {e.filename or e}")
        raise typer.Exit(1)
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        console.print("[red]internal error[/red], see the log for the traceback")
        raise typer.Exit(2)


def _experiment(spec: Path, seed: Optional[int], no_dbo: bool) -> ExperimentSpec:
    exp = load_experiment(spec)
    update: Dict[str, Any] = {}
    if seed is not None:
        update["run"] = exp.run.model_copy(update={"seed": seed})
    if no_dbo:
        update["dbo"] = False
    return exp.model_copy(update=update) if update else exp


def _jobs(jobs: Optional[int]) -> int:
    return max(1, jobs if jobs is not None else settings.DEFAULT_JOBS)


SpecOpt = typer.Option(..., "--spec", help="Spec file (TOML)")
OutOpt = typer.Option(Path("out"), "--out", help="Output directory")
SeedOpt = typer.Option(None, "--seed", help="Override the spec seed")
JobsOpt = typer.Option(None, "--jobs", help="Worker processes (default: CPHLAB_JOBS)")
NoDboOpt = typer.Option(False, "--no-dbo", help="Fixed barriers and wells")


def _titration_table(report: TitrationReport) -> Table:
    t = Table(title=f"{report.experiment} (dbo={'on' if report.dbo else 'off'})")
    for col in ("site", "pKa", "95% CI", "Hill n", "max sd", "notes"):
        t.add_column(col)
    for s in report.sites:
        hh, hill = s.hh, s.hill
        ci = f"{hh.ci_lo:.3f}..{hh.ci_hi:.3f}" if hh and hh.ci_lo is not None and hh.ci_hi is not None else "-"
        notes = ", ".join(e.error for e in s.errors)
        if s.spread_replica:
            notes = ", ".join(filter(None, [notes, "spread replicas"]))
        t.add_row(
            s.site,
            f"{hh.pKa:.3f}" if hh else "-",
            ci,
            f"{hill.hill_n:.2f}" if hill else "-",
            f"{s.max_replica_sd:.3f}",
            notes,
        )
    return t


# -----------------------
# Commands
# -----------------------
@app.command("calibrate")
def calibrate(
    spec: Path = SpecOpt,
    out: Path = OutOpt,
    seed: Optional[int] = SeedOpt,
) -> None:
    """Fit the Vmm calibration polynomial from a reference model."""
    with _handled():
        cal = load_calibration_spec(spec)
        if seed is not None:
            cal = cal.model_copy(update={"seed": seed})
        joint, per_replica = pipeline.run_calibration(cal, out)
        console.print(f"vmm.json written to {out} (rms residual {joint.rms_residual:.3g}, replicas {len(per_replica)})")


@app.command("simulate")
def simulate(
    spec: Path = SpecOpt,
    out: Path = OutOpt,
    config: Optional[Path] = typer.Option(None, "--config", help="Flat run config overriding [run]"),
    ph: Optional[float] = typer.Option(None, "--ph", help="Only this pH"),
    replica: Optional[int] = typer.Option(None, "--replica", help="Only this replica"),
    seed: Optional[int] = SeedOpt,
    jobs: Optional[int] = JobsOpt,
    no_dbo: bool = NoDboOpt,
) -> None:
    """Write trajectories for the spec's cells (missing ones only)."""
    with _handled():
        exp = _experiment(spec, seed, no_dbo)
        if config is not None:
            run = load_run_config(config)
            exp = exp.model_copy(update={"run": run if seed is None else run.model_copy(update={"seed": seed})})
            # a flat run config describes one run, at its own pH
            if ph is None:
                ph = run.pH
        todo = [
            (p, r)
            for p, r in pipeline.cells(exp)
            if (ph is None or abs(p - ph) < 1e-9) and (replica is None or r == replica)
        ]
        if ph is not None and not any(abs(p - ph) < 1e-9 for p, _ in todo):
            todo = [(ph, r) for r in range(exp.replicas) if replica is None or r == replica]
        vmm = load_site_polynomials(exp, spec.parent)
        outcomes = pipeline.run_cells(exp, vmm, out, _jobs(jobs), todo)
        t = Table(title="cells")
        for col in ("pH", "replica", "status"):
            t.add_column(col)
        for o in outcomes:
            t.add_row(f"{o.pH:.2f}", str(o.replica), o.status if not o.error else f"failed: {o.error['error']}")
        console.print(t)


@app.command("titrate")
def titrate(
    spec: Path = SpecOpt,
    out: Path = OutOpt,
    seed: Optional[int] = SeedOpt,
    jobs: Optional[int] = JobsOpt,
    no_dbo: bool = NoDboOpt,
    bootstrap: int = typer.Option(settings.BOOTSTRAP_SAMPLES, "--bootstrap", help="Bootstrap resamples"),
) -> None:
    """Run every (pH, replica) cell, then fit and report."""
    with _handled():
        exp = _experiment(spec, seed, no_dbo)
        vmm = load_site_polynomials(exp, spec.parent)
        report = pipeline.titrate(exp, vmm, out, _jobs(jobs), bootstrap)
        console.print(_titration_table(report))


@app.command("report")
def report(
    spec: Path = SpecOpt,
    out: Path = OutOpt,
    seed: Optional[int] = SeedOpt,
    no_dbo: bool = NoDboOpt,
    bootstrap: int = typer.Option(settings.BOOTSTRAP_SAMPLES, "--bootstrap", help="Bootstrap resamples"),
) -> None:
    """Rebuild dataset, report and plots from the trajectories on disk."""
    with _handled():
        exp = _experiment(spec, seed, no_dbo)
        console.print(_titration_table(pipeline.build_titration(exp, out, bootstrap)))


@app.command("analyze")
def analyze(
    spec: Path = SpecOpt,
    out: Path = OutOpt,
    seed: Optional[int] = SeedOpt,
    no_dbo: bool = NoDboOpt,
    bootstrap: int = typer.Option(settings.BOOTSTRAP_SAMPLES, "--bootstrap", help="Bootstrap resamples"),
) -> None:
    """Coupling screen (+ macroscopic fits) and FMA where features exist."""
    with _handled():
        exp = _experiment(spec, seed, no_dbo)
        cp, fm = pipeline.analyze(exp, out, bootstrap)
        t = Table(title="coupling")
        for col in ("pair", "max NMI", "flagged", "pKa1", "pKa2", "dG (kJ/mol)"):
            t.add_column(col)
        for p in cp.pairs:
            t.add_row(
                f"{p.a}-{p.b}",
                f"{p.max_nmi:.3f}",
                "yes" if p.flagged else "no",
                f"{p.macro_pka1:.2f}" if p.macro_pka1 is not None else "-",
                f"{p.macro_pka2:.2f}" if p.macro_pka2 is not None else "-",
                f"{p.coupling_free_energy:.2f}" if p.coupling_free_energy is not None else "-",
            )
        console.print(t)
        if fm.notice:
            console.print(fm.notice)
        for s in fm.sites:
            console.print(f"FMA {s.site}: R2 validation {s.r2_validation}, {s.n_components} components")
