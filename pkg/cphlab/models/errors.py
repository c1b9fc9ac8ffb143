"""
Goal: One small error family for every numerical failure in cphlab.
Each error carries a stable snake_case code so reports and the CLI can
surface it as {"error", "message", "detail"} without string matching.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class CphError(Exception):
    code = "cph_error"

    def __init__(self, message: str, *, detail: Optional[str] = None) -> None:
        super().__init__(message)
        self.message = message
        self.detail = detail

    def as_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": self.message, "detail": self.detail}


class InvalidInputError(CphError, ValueError):
    code = "invalid_input"


class DomainError(CphError, ValueError):
    code = "domain_error"


class SingularFitError(CphError, RuntimeError):
    code = "singular_fit"


class UnattainableTargetError(CphError, RuntimeError):
    code = "unattainable_target"


class IntegrationDivergedError(CphError, RuntimeError):
    code = "integration_diverged"

    def __init__(self, message: str, *, step: int, detail: Optional[str] = None) -> None:
        super().__init__(message, detail=detail)
        self.step = step


class EmptyDataError(CphError, ValueError):
    code = "empty_data"


class UnidentifiableFitError(CphError, RuntimeError):
    code = "unidentifiable_fit"


class FitError(CphError, RuntimeError):
    code = "fit_error"

    def __init__(
        self,
        message: str,
        *,
        diagnostics: Optional[Dict[str, Any]] = None,
        detail: Optional[str] = None,
    ) -> None:
        super().__init__(message, detail=detail)
        self.diagnostics = dict(diagnostics or {})


class InsufficientDataError(CphError, ValueError):
    code = "insufficient_data"


class DegenerateTargetError(CphError, ValueError):
    code = "degenerate_target"


class SpecError(CphError, ValueError):
    """Problems in a spec/config file. `line` is 1-based when known."""

    code = "spec_error"

    def __init__(self, message: str, *, line: Optional[int] = None, detail: Optional[str] = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, detail=detail)
        self.line = line


class ResumeMismatchError(CphError, ValueError):
    """Trajectories in the output directory come from different dynamics settings."""

    code = "resume_mismatch"
