"""
Goal: CSV interchange for trajectories, controller events and the dataset.

Trajectory files are long format, one row per (frame, site):
    step,time_ps,site,lambda_p,lambda_t,censored[,total_charge][,f1..fd]
Files are written to a temp name and renamed, so a present file is a
complete file; the pipeline's resume logic depends on that.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import List, Sequence

import numpy as np
import pandas as pd

from cphlab.models.errors import InvalidInputError
from cphlab.services.dbo import ControllerEvent
from cphlab.services.dynamics import LambdaTrajectory
from cphlab.services.titration import TitrationDataset

FLOAT_FORMAT = "%.12g"
TRAJ_COLUMNS = ["step", "time_ps", "site", "lambda_p", "lambda_t", "censored"]
EVENT_COLUMNS = ["time_ps", "site", "kind", "old", "new", "target"]


def cell_dir(out: Path, pH: float) -> Path:
    return out / "trajectories" / f"ph_{pH:.2f}"


def run_manifest_path(out: Path) -> Path:
    return out / "trajectories" / "run.json"


def trajectory_path(out: Path, pH: float, replica: int) -> Path:
    return cell_dir(out, pH) / f"replica_{replica:03d}.csv"


def events_path(out: Path, pH: float, replica: int) -> Path:
    return cell_dir(out, pH) / f"replica_{replica:03d}.events.csv"


def _atomic_csv(df: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    df.to_csv(tmp, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    os.replace(tmp, path)


def trajectory_frame(traj: LambdaTrajectory) -> pd.DataFrame:
    n_frames, n_sites = traj.lambda_p.shape
    data = {
        "step": np.repeat(traj.steps, n_sites),
        "time_ps": np.repeat(traj.time_ps, n_sites),
        "site": np.tile(np.array(traj.site_ids, dtype=object), n_frames),
        "lambda_p": traj.lambda_p.ravel(),
        "lambda_t": traj.lambda_t.ravel(),
        "censored": traj.censored.ravel().astype(np.int8),
    }
    if traj.total_charge is not None:
        data["total_charge"] = np.repeat(traj.total_charge, n_sites)
    if traj.features is not None:
        for k in range(traj.features.shape[1]):
            data[f"f{k + 1}"] = np.repeat(traj.features[:, k], n_sites)
    return pd.DataFrame(data)


def write_trajectory(traj: LambdaTrajectory, path: Path) -> None:
    _atomic_csv(trajectory_frame(traj), path)


def read_trajectory(path: Path, pH: float, replica: int, dt: float) -> LambdaTrajectory:
    df = pd.read_csv(path)
    missing = [c for c in TRAJ_COLUMNS if c not in df.columns]
    if missing:
        raise InvalidInputError(f"{path.name}: missing columns {missing}")
    sites = tuple(str(s) for s in dict.fromkeys(df["site"]))
    n_sites = len(sites)
    if len(df) % max(n_sites, 1):
        raise InvalidInputError(f"{path.name}: rows are not a whole number of frames")
    n_frames = len(df) // max(n_sites, 1)

    def grid(col: str) -> np.ndarray:
        return df[col].to_numpy().reshape(n_frames, n_sites)

    steps = df["step"].to_numpy(dtype=np.int64)[::n_sites] if n_sites else np.zeros(0, dtype=np.int64)
    fcols = [c for c in df.columns if c.startswith("f") and c[1:].isdigit()]
    features = df[fcols].to_numpy(dtype=float)[::n_sites] if fcols else None
    total_charge = df["total_charge"].to_numpy(dtype=float)[::n_sites] if "total_charge" in df.columns else None
    return LambdaTrajectory(
        site_ids=sites,
        pH=pH,
        replica=replica,
        dt=dt,
        steps=steps,
        lambda_p=grid("lambda_p").astype(float),
        lambda_t=grid("lambda_t").astype(float),
        censored=grid("censored").astype(bool),
        features=features,
        total_charge=total_charge,
    )


def write_events(events: Sequence[ControllerEvent], path: Path) -> None:
    rows = [
        {"time_ps": e.time_ps, "site": e.site, "kind": e.kind, "old": e.old, "new": e.new, "target": e.target}
        for e in events
    ]
    _atomic_csv(pd.DataFrame(rows, columns=EVENT_COLUMNS), path)


def read_events(path: Path) -> List[ControllerEvent]:
    if not path.exists():
        return []
    df = pd.read_csv(path)
    return [
        ControllerEvent(float(r.time_ps), str(r.site), str(r.kind), str(r.target), float(r.old), float(r.new))
        for r in df.itertuples()
    ]


def write_dataset(dataset: TitrationDataset, path: Path) -> None:
    _atomic_csv(dataset.table, path)


def write_frame(df: pd.DataFrame, path: Path) -> None:
    _atomic_csv(df, path)
