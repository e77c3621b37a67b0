"""key=value run configuration files.

Lines are ``key = value``; blank lines and '#' comments are ignored.
Unknown keys are rejected so typos fail loudly.  Defaults: 16 ladder
levels, 3x3-block regions, 26.0 dB offload threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


def _parse_region(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise ConfigError(f"region must look like 3x3, got {text!r}") from exc


@dataclass
class RunConfig:
    frames: str = ""
    labels: str = ""
    out: str = ""
    tables: str = ""
    b: float = 0.0
    l: int = 16
    thr: float = 26.0
    region: str = "3x3"
    subsampling: str = "420"
    oracle: str = "toy"
    mode: str = "stac"
    fps: float = 17.0
    mid_level: int = 0
    seed: int = 0
    share_chroma_ladder: bool = False

    @property
    def region_wh(self) -> tuple[int, int]:
        return _parse_region(self.region)

    def validate(self) -> None:
        if self.l < 1 or self.l > 16:
            raise ConfigError("l must be in [1, 16]")
        if self.subsampling not in ("420", "444"):
            raise ConfigError("subsampling must be 420 or 444")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if not (self.mode in ("stac", "uniform", "per-frame")
                or self.mode.startswith("uniform:")):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.oracle != "toy" and not self.oracle.startswith("sgrd:"):
            raise ConfigError(f"unknown oracle {self.oracle!r}")
        _parse_region(self.region)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _convert(key, raw))
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for key, value in overrides.items():
        if value is None:
            continue
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        setattr(cfg, key, value)
    return cfg
