"""Experiment configuration: one JSON document plus ``--set`` overrides.

Sections map onto the pipeline stages. Unknown keys are rejected and every
numeric range is checked by the section's own dataclass. Unset paths default
to standard file names inside ``paths.output_dir``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, FedGraphError
from .federation import FederationConfig
from .graphs import CorrConfig
from .synthetic import SyntheticConfig

DEFAULT_NAMES = {
    "recording": "recording.sts",
    "labels": "labels.csv",
    "positions": "positions.csv",
    "features": "features.npy",
    "graphs": "graphs.gds",
}


@dataclass
class PathsConfig:
    output_dir: str = "out"
    recording: str | None = None
    labels: str | None = None
    positions: str | None = None
    conv_weights: str | None = None
    features: str | None = None
    graphs: str | None = None
    checkpoint: str | None = None

    def resolve(self, name: str) -> Path:
        value = getattr(self, name)
        if value is not None:
            return Path(value)
        if name in DEFAULT_NAMES:
            return Path(self.output_dir) / DEFAULT_NAMES[name]
        raise ConfigError(f"paths.{name} is not set")


@dataclass
class ExtractorConfig:
    kind: str = "stat"
    n_bands: int = 10

    def __post_init__(self):
        if self.kind not in ("stat", "conv"):
            raise ConfigError(f"extractor.kind must be 'stat' or 'conv', got {self.kind!r}")
        if self.n_bands < 1:
            raise ConfigError("extractor.n_bands must be at least 1")


@dataclass
class ModelSection:
    n_layers: int = 2
    hidden_dim: int = 64
    n_classes: int = 5
    dropout_rate: float = 0.3

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_dim < 1 or self.n_classes < 1:
            raise ConfigError("model sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("model.dropout_rate must be in [0, 1)")


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    corr: CorrConfig = field(default_factory=CorrConfig)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationConfig = field(default_factory=FederationConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


SECTIONS = {
    "paths": PathsConfig,
    "extractor": ExtractorConfig,
    "corr": CorrConfig,
    "model": ModelSection,
    "federation": FederationConfig,
    "synthetic": SyntheticConfig,
}


def _build_section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    defaults = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(f"{name}.{key}", defaults[key], value)
    try:
        return cls(**kwargs)
    except FedGraphError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def _coerce(key: str, fld: dataclasses.Field, value):
    # Annotations are strings under postponed evaluation.
    kind = str(fld.type)
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{key} may not be null")
    if kind.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
    elif kind.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        value = float(value)
    elif kind.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build_section(name, cls, data.get(name, {})) for name, cls in SECTIONS.items()}
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return ExperimentConfig(seed=seed, **kwargs)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        if parts == ["seed"]:
            data["seed"] = value
            continue
        if len(parts) != 2:
            raise ConfigError(f"--set key must look like section.key, got {key!r}")
        data.setdefault(parts[0], {})
        if not isinstance(data[parts[0]], dict):
            raise ConfigError(f"section {parts[0]!r} must be an object")
        data[parts[0]][parts[1]] = value
    return data


def load_config(path: str | None, overrides: list[str] = (), seed: int | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    data = apply_overrides(data, list(overrides))
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)
