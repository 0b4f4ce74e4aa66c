"""Run configuration: JSON file + command-line overrides + defaults.

Precedence is flag > file > default. Defaults are the full-scale settings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ._validation import ValidationError
from .attack import Stage1Config, Stage2Config
from .dsp import StftConfig


class ConfigError(ValidationError):
    """Invalid or incomplete run configuration; the message names the field."""


@dataclass(frozen=True)
class ModelSettings:
    hidden_dim: int = 512
    pooling_dim: int = 1500
    fc_dims: tuple = (512, 512)
    n_mfcc: int = 30


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class RunConfig:
    manifest: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    seed: int = 0
    workers: int = 1
    stft: StftConfig = field(default_factory=StftConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["fc_dims"] = list(self.model.fc_dims)
        return d

    def require(self, *names: str) -> None:
        for name in names:
            value = getattr(self, name)
            if value in (None, ""):
                raise ConfigError(f"{name}: required but not set (use --{name} or the config file)")

    def require_existing(self, *names: str) -> None:
        self.require(*names)
        for name in names:
            if not Path(getattr(self, name)).exists():
                raise ConfigError(f"{name}: file not found: {getattr(self, name)}")


_SECTIONS = {
    "stft": StftConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "model": ModelSettings,
    "train": TrainSettings,
}

# flag name -> (section or None, field)
OVERRIDES = {
    "manifest": (None, "manifest"),
    "checkpoint": (None, "checkpoint"),
    "out": (None, "out"),
    "seed": (None, "seed"),
    "workers": (None, "workers"),
    "eps0": ("stage1", "eps0"),
    "lr1": ("stage1", "lr"),
    "stage1_steps": ("stage1", "steps"),
    "stage1_optimizer": ("stage1", "optimizer"),
    "lr2": ("stage2", "lr"),
    "alpha0": ("stage2", "alpha0"),
    "stage2_steps": ("stage2", "steps"),
    "stage2_optimizer": ("stage2", "optimizer"),
    "epochs": ("train", "epochs"),
    "hidden_dim": ("model", "hidden_dim"),
    "pooling_dim": ("model", "pooling_dim"),
    "fc_dims": ("model", "fc_dims"),
}


def _build_section(name: str, cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown setting")
    if "fc_dims" in values:
        values = {**values, "fc_dims": tuple(values["fc_dims"])}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be a JSON object")
    kwargs = {}
    top = {f.name for f in fields(RunConfig)}
    for key, value in d.items():
        if key not in top:
            raise ConfigError(f"{key}: unknown setting")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: must be an object")
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {path} (line {exc.lineno}): {exc.msg}") from None
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply non-None values keyed by flag name (see ``OVERRIDES``)."""
    top, sections = {}, {}
    for flag, value in overrides.items():
        if value is None or flag not in OVERRIDES:
            continue
        section, name = OVERRIDES[flag]
        if section is None:
            top[name] = value
        else:
            sections.setdefault(section, {})[name] = value
    for section, values in sections.items():
        current = asdict(getattr(cfg, section))
        current.update(values)
        top[section] = _build_section(section, _SECTIONS[section], current)
    return replace(cfg, **top)


def resolve_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = load_config(path) if path else RunConfig()
    return apply_overrides(cfg, overrides or {})
