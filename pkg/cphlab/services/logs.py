"""
Goal: Set up loguru logging: a console sink on stderr plus a rolling daily file
under CPHLAB_LOG_DIR.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

from loguru import logger

from cphlab import settings


def configure_logging(level: Optional[str] = None, log_dir: Optional[Path] = None) -> None:
    logger.remove()
    logger.add(
        sys.stderr,
        level=(level or settings.LOG_LEVEL).upper(),
        colorize=True,
        backtrace=False,
        diagnose=False,
    )
    target = Path(log_dir or settings.LOG_DIR)
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        # Read-only homes (CI sandboxes) still get console output
        logger.warning("log dir {} unavailable ({}); file logging off", target, exc)
        return
    logger.add(
        str(target / "{time:YYYY-MM-DD}.log"),
        rotation="00:00",
        retention="14 days",
        level="INFO",
        backtrace=False,
        diagnose=False,
        serialize=False,
        enqueue=True,
    )
