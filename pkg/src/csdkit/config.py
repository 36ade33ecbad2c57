"""Layered run configuration: defaults -> YAML file -> explicit overrides.

A YAML config has up to five sections (dataset, model, train, loss,
augment), each mapping onto one of the frozen config dataclasses.
Unknown sections or keys are errors, not warnings — a typo that
silently falls back to a default is how wrong experiments get published.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augment import AugmentConfig
from .losses import LossConfig
from .model import FusionConfig
from .training import TrainConfig
from .types import ValidationError


@dataclass(frozen=True)
class DatasetConfig:
    """Windowing and crop geometry for corpus preparation."""

    window_frames: int = 7
    hop: int = 1
    crop_size: int = 224

    def __post_init__(self) -> None:
        if self.window_frames < 1 or self.hop < 1 or self.crop_size < 8:
            raise ValidationError("window_frames/hop >= 1 and crop_size >= 8 required")


_SECTIONS: dict[str, type] = {
    "dataset": DatasetConfig,
    "model": FusionConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "augment": AugmentConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """One experiment's complete configuration."""

    dataset: DatasetConfig = DatasetConfig()
    model: FusionConfig = FusionConfig()
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(_plain(self.to_dict()), sort_keys=True)

    def hash(self) -> str:
        """Stable 16-hex digest of the full configuration."""
        blob = json.dumps(_plain(self.to_dict()), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(value):
    """Make a config dict YAML/JSON-friendly (tuples -> lists, recursively)."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(cls: type, raw: Mapping[str, Any]):
    """Build a config dataclass from a mapping, rejecting unknown keys."""
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(field_map)
    if unknown:
        raise ValidationError(
            f"unknown keys for {cls.__name__}: {sorted(unknown)} "
            f"(valid: {sorted(field_map)})"
        )
    kwargs = {}
    for key, value in raw.items():
        default = field_map[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Mapping[str, Any]] | None = None,
) -> RunConfig:
    """Defaults, overlaid with a YAML file, overlaid with overrides.

    ``overrides`` is a nested mapping like {"train": {"seed": 3}} —
    typically assembled from CLI flags. Either layer may be absent.
    """
    layers: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValidationError(f"config root must be a mapping, got {type(raw).__name__}")
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ValidationError(
                f"unknown config sections: {sorted(unknown)} (valid: {sorted(_SECTIONS)})"
            )
        for name, section in raw.items():
            if section is None:
                continue
            if not isinstance(section, dict):
                raise ValidationError(f"section {name!r} must be a mapping")
            layers[name].update(section)
    for name, section in (overrides or {}).items():
        if name not in _SECTIONS:
            raise ValidationError(f"unknown config section {name!r}")
        layers[name].update({k: v for k, v in section.items() if v is not None})
    return RunConfig(
        **{name: _coerce(cls, layers[name]) for name, cls in _SECTIONS.items()}
    )


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_yaml())
