"""
Goal: Read experiment specs, run configs and calibration specs from TOML.
- Parse errors name the offending line.
- Validation errors are turned into SpecError with the key path.
- The spec hash is taken over the validated model, so formatting is irrelevant.
"""

from __future__ import annotations

import hashlib  # spec hash
import re  # line number out of tomllib messages
try:
    import tomllib  # TOML parser (3.11+)
except ModuleNotFoundError:  # Python 3.10: same parser as a backport
    import tomli as tomllib
from pathlib import Path  # path utilities
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ValidationError

from cphlab.models.errors import SpecError
from cphlab.models.schemas import CalibrationSpec, ExperimentSpec, RunConfig
from cphlab.services.bias import CalibrationPolynomial

M = TypeVar("M", bound=BaseModel)

_LINE_RE = re.compile(r"at line (\d+)")
# Top-level shortcuts that live in [run]
_RUN_SHORTCUTS = ("n_steps", "seed")


def _read_toml(path: Path) -> Tuple[Dict[str, Any], str]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except OSError as e:
        raise SpecError(f"cannot read {path}: {e}") from e
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as e:
        m = _LINE_RE.search(str(e))
        raise SpecError(f"{path.name}: {e}", line=int(m.group(1)) if m else None) from e


def _line_of(text: str, key: str) -> Optional[int]:
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for n, line in enumerate(text.splitlines(), start=1):
        if pat.match(line):
            return n
    return None


def _validate(model: Type[M], data: Dict[str, Any], text: str, name: str) -> M:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        last = next((str(p) for p in reversed(err["loc"]) if isinstance(p, str)), "")
        raise SpecError(f"{name}: {loc or 'spec'}: {err['msg']}", line=_line_of(text, last) if last else None) from e


def load_experiment(path: Path) -> ExperimentSpec:
    data, text = _read_toml(path)
    run = dict(data.pop("run", {}) or {})
    for key in _RUN_SHORTCUTS:
        if key in data:
            run.setdefault(key, data.pop(key))
    data["run"] = run
    return _validate(ExperimentSpec, data, text, path.name)


def load_run_config(path: Path) -> RunConfig:
    data, text = _read_toml(path)
    return _validate(RunConfig, data, text, path.name)


def load_calibration_spec(path: Path) -> CalibrationSpec:
    data, text = _read_toml(path)
    return _validate(CalibrationSpec, data, text, path.name)


def load_polynomial(path: Path) -> CalibrationPolynomial:
    try:
        return CalibrationPolynomial.model_validate_json(path.read_bytes())
    except ValidationError as e:
        raise SpecError(f"{path.name}: not a calibration polynomial: {e.errors()[0]['msg']}") from e


def load_site_polynomials(spec: ExperimentSpec, base_dir: Path) -> Dict[str, CalibrationPolynomial]:
    """Vmm polynomials referenced by sites; paths are relative to the spec file."""
    out = {}
    for site in spec.sites:
        if site.vmm:
            out[site.id] = load_polynomial((base_dir / site.vmm).resolve())
    return out


def spec_hash(spec: BaseModel) -> str:
    return hashlib.sha256(spec.model_dump_json().encode("utf-8")).hexdigest()[:16]


# fields a rerun may change without invalidating trajectories already on disk
RESUME_NEUTRAL = {"name": True, "ph_values": True, "replicas": True, "run": {"pH"}}


def dynamics_hash(spec: ExperimentSpec) -> str:
    """Hash of everything that shapes a cell's trajectory."""
    payload = spec.model_dump_json(exclude=RESUME_NEUTRAL)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
