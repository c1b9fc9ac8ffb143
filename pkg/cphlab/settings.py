"""
Goal: Centralized defaults for cphlab (paths, worker count, logging).
Everything can be overridden from the environment; nothing touches disk at import.
"""

import os
from pathlib import Path

# Home for rolling logs; handy to keep out of the experiment output folders
APP_DIR = Path(os.getenv("CPHLAB_HOME") or str(Path.home() / ".cphlab"))
LOG_DIR = Path(os.getenv("CPHLAB_LOG_DIR") or str(APP_DIR / "logs"))
LOG_LEVEL = os.getenv("CPHLAB_LOG_LEVEL", "INFO").upper()


def _int_env(name: str, default: int) -> int:
    try:
        return int(os.getenv(name, str(default)))
    except ValueError:
        return default


# Worker pool size for (pH, replica) cells; --jobs wins over this
DEFAULT_JOBS = max(1, _int_env("CPHLAB_JOBS", os.cpu_count() or 1))

# Bootstrap resamples per pKa confidence interval
BOOTSTRAP_SAMPLES = max(1, _int_env("CPHLAB_BOOTSTRAP_SAMPLES", 5000))
