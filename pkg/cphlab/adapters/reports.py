"""
Goal: Write the JSON reports and their CSV mirrors.
Output is deterministic: sorted keys, fixed indent, trailing newline, no timestamps.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Type, TypeVar

import pandas as pd
from pydantic import BaseModel

from cphlab.adapters.trajectory_csv import write_frame
from cphlab.models.schemas import TitrationReport

M = TypeVar("M", bound=BaseModel)


def _finite(obj: Any) -> Any:
    # NaN/inf have no JSON spelling; they become null
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def write_json(model: BaseModel, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(_finite(model.model_dump()), indent=2, sort_keys=True, allow_nan=False)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(payload + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_json(model: Type[M], path: Path) -> M:
    return model.model_validate_json(path.read_bytes())


def titration_rows(report: TitrationReport) -> List[Dict[str, Any]]:
    """One row per (site, pH) with the site's fits repeated, for spreadsheets."""
    rows = []
    for site in report.sites:
        hh = site.hh
        hill = site.hill
        for p in site.points:
            rows.append(
                {
                    "site": site.site,
                    "pH": p.pH,
                    "mean_fraction": p.mean,
                    "sd_fraction": p.sd,
                    "n_replicas": len(p.fractions),
                    "transitions_per_ns": p.transitions_per_ns,
                    "in_transition": p.in_transition,
                    "pKa": hh.pKa if hh else None,
                    "ci_lo": hh.ci_lo if hh else None,
                    "ci_hi": hh.ci_hi if hh else None,
                    "hill_pKa": hill.pKa if hill else None,
                    "hill_n": hill.hill_n if hill else None,
                    "spread_replica": site.spread_replica,
                }
            )
    return rows


def write_titration_csv(report: TitrationReport, path: Path) -> None:
    write_frame(pd.DataFrame(titration_rows(report)), path)
