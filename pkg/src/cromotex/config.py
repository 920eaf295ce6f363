"""Experiment configuration: strict JSON round-trip and a JSON schema."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import GeneratorConfig
from .losses import AhnpConfig
from .model import EncoderConfig
from .signal import AugmentConfig


class ConfigError(ValueError):
    """A config value or key failed validation; ``field`` names the dotted path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 15
    batch_size: int = 256
    start_lr: float = 1e-5
    peak_lr: float = 1e-4
    end_lr: float = 1e-5
    warmup_epochs: int = 10
    weight_decay: float = 0.0
    decoupled: bool = False
    clip_norm: Optional[float] = None
    head_lr_scale: float = 1.0
    minority_target: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if self.minority_target is not None and not 0 < self.minority_target < 1:
            raise ValueError("minority_target must lie in (0, 1)")


@dataclass(frozen=True)
class AblationConfig:
    no_ssl: bool = False
    no_ahnp: bool = False


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    seeds: tuple = (0,)
    data_path: Optional[str] = None
    generator: GeneratorConfig = GeneratorConfig()
    split_fractions: tuple = (0.7, 0.1, 0.2)
    encoder: EncoderConfig = EncoderConfig()
    teacher: StageConfig = StageConfig(epochs=20, batch_size=64)
    pretrain: StageConfig = StageConfig(epochs=15, batch_size=256)
    align: StageConfig = StageConfig(
        epochs=20, batch_size=256, weight_decay=1e-5, decoupled=True,
        clip_norm=2.5, head_lr_scale=0.1, minority_target=0.275,
    )
    finetune: StageConfig = StageConfig(
        epochs=15, batch_size=256, start_lr=1e-6, peak_lr=1e-5, end_lr=1e-6,
        minority_target=0.275,
    )
    ahnp: AhnpConfig = AhnpConfig()
    augment: AugmentConfig = AugmentConfig()
    ssl_tau: float = 0.1
    normalize_projections: bool = True
    threshold_mode: str = "fixed"
    ablation: AblationConfig = AblationConfig()
    checkpoint_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.threshold_mode not in ("fixed", "val_f1"):
            raise ValueError("threshold_mode must be 'fixed' or 'val_f1'")
        if self.ssl_tau <= 0:
            raise ValueError("ssl_tau must be > 0")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _from_plain(cls, data, "config")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _field_types(cls):
    return typing.get_type_hints(cls)


def _coerce(tp, value, path, base=None):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _from_plain(tp, value, path, base)
    if tp is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _from_plain(cls, data, path, base=None):
    """Build ``cls`` from a dict; keys missing from ``data`` keep ``base``'s values (or the field defaults)."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    types = _field_types(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    # a partial nested object overrides the enclosing default, e.g. TrainConfig().align
    defaults = {f.name: getattr(base, f.name) if base is not None else _field_default(f)
                for f in dataclasses.fields(cls)}
    kwargs = {k: _coerce(types[k], v, f"{path}.{k}", defaults[k]) for k, v in data.items()}
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from exc


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _schema_for(tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return {"anyOf": [_schema_for(inner), {"type": "null"}]}
    if dataclasses.is_dataclass(tp):
        types = _field_types(tp)
        return {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _schema_for(types[f.name]) for f in dataclasses.fields(tp)},
        }
    if tp is tuple or origin is tuple:
        return {"type": "array"}
    return {bool: {"type": "boolean"}, int: {"type": "integer"}, float: {"type": "number"},
            str: {"type": "string"}}.get(tp, {})


def json_schema() -> dict:
    """JSON schema of the config file (every key optional, unknown keys rejected)."""
    schema = _schema_for(TrainConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "cromotex experiment config"
    return schema
