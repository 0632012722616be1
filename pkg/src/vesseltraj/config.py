"""Run configuration: a JSON document with data/model/train/uncertainty/eval sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    delta: float = 900.0
    seq_in: int = 12
    seq_out: int = 12
    gap: float = 3600.0
    zone: int = 32
    ship_type: str | None = "Tanker"
    regions: str | None = None
    labels: str | None = None
    splits: tuple[float, float, float] = (0.72, 0.08, 0.20)
    seed: int = 0

    def __post_init__(self):
        self.splits = tuple(float(f) for f in self.splits)
        if self.delta <= 0 or self.gap <= 0:
            raise ConfigError("delta and gap must be positive")
        if self.seq_in < 2 or self.seq_out < 1:
            raise ConfigError("need seq_in >= 2 and seq_out >= 1")
        if not 1 <= self.zone <= 60:
            raise ConfigError(f"UTM zone {self.zone} out of range")


@dataclass
class UncertaintyConfig:
    samples: int = 100

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError("uncertainty.samples must be at least 1")


@dataclass
class EvalConfig:
    origin: tuple[float, float] | None = None  # easting, northing; None uses the dataset's
    bin_nmi: float = 5.0
    levels: tuple[float, ...] = (0.68, 0.95)

    def __post_init__(self):
        if self.origin is not None:
            self.origin = tuple(float(v) for v in self.origin)
            if len(self.origin) != 2:
                raise ConfigError("eval.origin must be [easting, northing]")
        self.levels = tuple(float(v) for v in self.levels)
        if self.bin_nmi <= 0 or any(not 0 < lv < 1 for lv in self.levels):
            raise ConfigError("eval.bin_nmi must be positive and levels inside (0, 1)")


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "uncertainty": UncertaintyConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown configuration section(s): {sorted(unknown)}")
        parts = {}
        for name, kind in SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(kind)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {sorted(bad)}")
            try:
                parts[name] = kind(**section)
            except TypeError as exc:
                raise ConfigError(f"bad value in {name}: {exc}") from exc
        return cls(**parts)

    def to_dict(self) -> dict[str, Any]:
        return {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, else as text."""
        doc = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            path, raw = item.split("=", 1)
            section, _, key = path.partition(".")
            if section not in SECTIONS or not key:
                raise ConfigError(f"override path {path!r} must be section.key with a known section")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            doc[section][key] = value
        return RunConfig.from_dict(doc)

    def replace(self, section: str, **changes) -> "RunConfig":
        return replace(self, **{section: replace(getattr(self, section), **changes)})


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(doc)
