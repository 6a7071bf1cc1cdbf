"""Pinned run configuration.

One JSON document drives a whole pipeline run; CLI flags override single
keys. The sha256-based hash of the effective config is embedded in every
output artifact so a report can be traced back to the exact settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .core import GRID_TENTHS_DEFAULT, GradePipeError
from .grade import HIGH_VARIANCE_THRESHOLD_TENTHS

GRADING_MODES = ("dual", "stabilized", "dual+stabilized")


class ConfigError(GradePipeError):
    """Config file missing, unparseable, or holding bad values."""


@dataclass(frozen=True)
class PipelineConfig:
    model_id: str = "replay"
    temperature: float = 0.0
    audit_override: bool = False
    parallelism: int = 8
    max_retries: int = 2
    grid_tenths: int = GRID_TENTHS_DEFAULT
    high_variance_threshold_tenths: int = HIGH_VARIANCE_THRESHOLD_TENTHS
    histogram_bin_width_tenths: int = 5
    withhold_flagged: bool = True
    mode: str = "dual"
    runs: int = 3

    def __post_init__(self) -> None:
        if self.mode not in GRADING_MODES:
            raise ConfigError(f"mode must be one of {GRADING_MODES}, got {self.mode!r}")
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        if "stabilized" in self.mode and self.runs < 2:
            raise ConfigError("stabilization needs at least 2 runs per rubric")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries cannot be negative")
        for name in ("grid_tenths", "high_variance_threshold_tenths", "histogram_bin_width_tenths"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive tenth count")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature out of range")


def load_config(path: Path | str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Build the effective config: file values, then non-None overrides."""
    values: dict = {}
    if path is not None:
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in fields(PipelineConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {unknown}")
        values.update(doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(config: PipelineConfig) -> str:
    """12-hex digest of the canonical JSON form; order-insensitive."""
    canonical = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def save_config(path: Path | str, config: PipelineConfig) -> None:
    Path(path).write_text(
        json.dumps(asdict(config), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
