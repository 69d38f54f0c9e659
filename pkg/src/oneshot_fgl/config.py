"""Strict JSON configuration for federation runs.

Every config section is a frozen dataclass; ``from_dict`` rejects unknown keys
with the full dotted path of the offender, and ``apply_overrides`` accepts
``section.key=value`` strings whose values are parsed as JSON when possible.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .client_stats import HreConfig, StatsConfig
from .gnn import ModelSpec, TrainConfig
from .personalize import PersonalizeConfig
from .surrogate import GenConfig

METHODS = ("opfgl", "standalone")
MODES = ("server_gen", "client_gen")


class ConfigError(ValueError):
    """Raised for malformed configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class CodecConfig:
    scale_bits: int = 16
    modulus_bits: int = 62


@dataclass(frozen=True)
class FederationConfig:
    dataset: str = ""
    num_clients: int = 10
    partition_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    method: str = "opfgl"
    mode: str = "server_gen"
    pooling: str = "paper"
    threads: int = 0
    stats: StatsConfig = field(default_factory=StatsConfig)
    hre: HreConfig = field(default_factory=HreConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    client_models: dict[str, ModelSpec] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1", "num_clients")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}", "method")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}", "mode")
        if self.pooling not in ("paper", "centralized"):
            raise ConfigError("pooling must be 'paper' or 'centralized'", "pooling")
        if not self.seeds:
            raise ConfigError("at least one seed is required", "seeds")
        if self.stats.prop_depth != self.gen.prop_depth:
            raise ConfigError(
                "stats.prop_depth and gen.prop_depth must agree", "gen.prop_depth"
            )

    def model_for(self, client_id: int) -> ModelSpec:
        return self.client_models.get(str(client_id), self.model)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'} must be an object", path)
        return from_dict(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list", path)
        return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be an object", path)
        return {str(k): _convert(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number", path)
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer", path)
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false", path)
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string", path)
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key {full!r}", full)
        kwargs[key] = _convert(hints[key], value, full)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}", path or None) from None


def to_dict(obj) -> dict:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Return a copy of ``data`` with ``a.b.c=value`` assignments applied."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", item)
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-object", key)
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides=(), base_dir=None) -> FederationConfig:
    """Read a JSON config (or start from defaults), apply overrides, validate.

    A relative ``dataset`` path is resolved against the config file's folder.
    """
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base_dir = path.parent if base_dir is None else base_dir
    data = apply_overrides(data, overrides)
    cfg = from_dict(FederationConfig, data)
    if cfg.dataset and base_dir is not None and not Path(cfg.dataset).is_absolute():
        cfg = dataclasses.replace(cfg, dataset=str((Path(base_dir) / cfg.dataset).resolve()))
    return cfg


__all__ = [
    "CodecConfig", "ConfigError", "FederationConfig", "GenConfig", "HreConfig",
    "ModelSpec", "PersonalizeConfig", "StatsConfig", "TrainConfig", "apply_overrides",
    "from_dict", "load_config", "to_dict",
]
