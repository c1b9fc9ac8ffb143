"""
Goal: One SVG titration plot per site: replica fractions as points, fitted sigmoid as a line.
Agg backend, fixed hash salt and no date metadata so reruns produce identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from cphlab.models.units import hh_fraction  # noqa: E402
from cphlab.services.titration import FitResult  # noqa: E402


def titration_svg(site: str, points: pd.DataFrame, fit: Optional[FitResult], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "cphlab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter(points["pH"], points["fraction"], s=14, alpha=0.6, label="replicas")
        if fit is not None:
            lo, hi = float(points["pH"].min()) - 1.0, float(points["pH"].max()) + 1.0
            grid = np.linspace(lo, hi, 200)
            ax.plot(grid, hh_fraction(grid, fit.pKa, fit.hill_n), color="k", lw=1.2,
                    label=f"pKa {fit.pKa:.2f}, n {fit.hill_n:.2f}")
            ax.axvline(fit.pKa, color="k", ls=":", lw=0.8)
        ax.set_xlabel("pH")
        ax.set_ylabel("deprotonated fraction")
        ax.set_ylim(-0.05, 1.05)
        ax.set_title(site)
        ax.legend(loc="upper left", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
