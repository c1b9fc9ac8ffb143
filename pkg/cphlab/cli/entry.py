"""
cphlab entrypoint

Goals
- `python -m cphlab` lands here; packaging scripts can import run().
"""

from __future__ import annotations

from cphlab.cli.cli import app


def run() -> None:
    app(prog_name="cphlab")


if __name__ == "__main__":
    run()
