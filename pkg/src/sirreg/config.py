"""JSON run configuration: defaults, strict key validation, echoing."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .energy import EnergyConfig
from .errors import ValidationError
from .fitting import FitConfig
from .metrics import EvalConfig


@dataclass(frozen=True)
class SirConfig:
    """Inference-time weighting settings shared by fit and characterisation."""

    temperature: float = 3.0
    gamma: float = 0.9
    space: str = "log"
    n_l: int = 1200
    n_k: int = 80

    def __post_init__(self):
        if self.n_l < 1 or self.n_k < 1:
            raise ValidationError("n_l and n_k must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    sir: SirConfig = field(default_factory=SirConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {"energy": EnergyConfig, "sir": SirConfig, "fit": FitConfig, "eval": EvalConfig}


def _build(cls, data: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValidationError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValidationError(f"bad config at {path or 'top level'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig; missing keys take defaults, unknown keys are errors."""
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    top = {k: v for k, v in data.items()}
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = top.pop(name, {})
        if not isinstance(section, dict):
            raise ValidationError(f"config section {name!r} must be an object")
        kwargs[name] = _build(cls, section, name)
    if "seed" in top:
        kwargs["seed"] = int(top.pop("seed"))
    if top:
        raise ValidationError(f"unknown config keys at top level: {sorted(top)}")
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed}
    for name in _SECTIONS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    """Echo the fully-resolved configuration (deterministic formatting)."""
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
