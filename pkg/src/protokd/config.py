"""Run configuration: strict YAML parsing, environment overrides, resolved snapshots."""
from __future__ import annotations

import copy
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augment import AugmentPolicy, default_image_policy, default_pseudo_image_policy
from .data import SplitSpec, SyntheticSpec
from .encoder import EncoderConfig
from .trainer import ABLATION_ROWS, METHOD_LOSSES, TrainConfig

ENV_PREFIX = "PROTOKD__"
DATA_SOURCES = ("synthetic", "image-folder", "pseudo-image")
AUGMENT_PRESETS = ("default", "pseudo", "none", "custom")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ValueError(f"must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"source {self.source!r} needs a path")


@dataclass(frozen=True)
class AugmentConfig:
    preset: str = "default"
    p: float = 0.5
    noise_fraction: float = 0.05
    transforms: tuple[dict, ...] = ()

    def __post_init__(self):
        if self.preset not in AUGMENT_PRESETS:
            raise ValueError(f"must be one of {AUGMENT_PRESETS}, got {self.preset!r}")
        if self.preset != "custom" and self.transforms:
            raise ValueError("transforms are only read with preset 'custom'")
        self.policy()  # validate eagerly

    def policy(self) -> AugmentPolicy:
        if self.preset == "default":
            return default_image_policy(self.p)
        if self.preset == "pseudo":
            return default_pseudo_image_policy(self.noise_fraction)
        if self.preset == "none":
            return AugmentPolicy()
        return AugmentPolicy.from_list(self.transforms)


@dataclass(frozen=True)
class BenchmarkConfig:
    methods: tuple[str, ...] = ("supervised", "protonet", "protokd")
    ablation_rows: tuple[str, ...] = ("Lm", "Ls", "Lm+Ls", "Lm+Ld", "Lm+Ls+Ld")

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHOD_LOSSES]
        if bad or not self.methods:
            raise ValueError(f"unknown method(s) {bad}")
        bad = [r for r in self.ablation_rows if r not in ABLATION_ROWS]
        if bad or not self.ablation_rows:
            raise ValueError(f"unknown ablation row(s) {bad}; expected some of {list(ABLATION_ROWS)}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    trials: int = 10
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("must be >= 1")

    def seeded(self, seed: int) -> RunConfig:
        """Same run with ``seed`` driving the split and the training stream."""
        return dataclasses.replace(
            self, seed=seed, split=dataclasses.replace(self.split, seed=seed), train=dataclasses.replace(self.train, seed=seed)
        )


# nested fields that are not parsed from the file; seeds follow the top-level seed
_DERIVED = {("split", "seed"), ("train", "seed"), ("data", "synthetic", "families")}


def _type_hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(hint, value, where)
    if origin is typing.Union or str(origin) == "types.UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint is dict or origin is dict:
        if not isinstance(value, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        return dict(value)
    return value


def _build(cls, raw: Mapping, where: str = ""):
    hints = _type_hints(cls)
    path = tuple(where.split(".")) if where else ()
    allowed = {f.name for f in dataclasses.fields(cls) if path + (f.name,) not in _DERIVED}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        names = ", ".join(f"'{where + '.' if where else ''}{k}'" for k in unknown)
        raise ConfigError(f"unknown config key(s): {names}")
    kwargs = {k: _coerce(v, hints[k], f"{where + '.' if where else ''}{k}") for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{where or 'config'}: {err}") from None


def apply_env_overrides(raw: dict, environ: Mapping[str, str] | None = None) -> dict:
    """``PROTOKD__TRAIN__EPOCHS=5`` sets ``train.epochs``; values are parsed as YAML scalars."""
    environ = os.environ if environ is None else environ
    out = copy.deepcopy(raw)
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {key}: '{p}' is not a section")
        node[parts[-1]] = yaml.safe_load(environ[key])
    return out


def from_dict(raw: Mapping | None) -> RunConfig:
    cfg = _build(RunConfig, raw or {})
    return cfg.seeded(cfg.seed)


def load_config(path: str | Path | None, environ: Mapping[str, str] | None = None, overrides: Mapping | None = None) -> RunConfig:
    """Read a YAML file (or defaults when ``path`` is None), then env and explicit overrides."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{p}: invalid YAML: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    raw = apply_env_overrides(raw, environ)
    for dotted, value in (overrides or {}).items():
        node = raw
        *head, last = dotted.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = value
    return from_dict(raw)


def to_dict(cfg: RunConfig) -> dict:
    """Fully resolved, re-loadable mapping (every default spelled out)."""

    def conv(obj, path=()):
        if dataclasses.is_dataclass(obj):
            return {
                f.name: conv(getattr(obj, f.name), path + (f.name,))
                for f in dataclasses.fields(obj)
                if path + (f.name,) not in _DERIVED
            }
        if isinstance(obj, (tuple, list)):
            return [conv(v, path) for v in obj]
        return obj

    return conv(cfg)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=False)


def config_reference() -> str:
    """Markdown table of every config key with its type and default."""
    lines = [
        "# Configuration reference",
        "",
        "Generated by `protokd config-reference`. Every key is optional; unknown keys are rejected.",
        f"Environment variables `{ENV_PREFIX}<SECTION>__<KEY>` override file values (parsed as YAML scalars).",
        "The top-level `seed` drives the data split and the training streams.",
        "",
        "| key | type | default |",
        "|---|---|---|",
    ]

    def walk(cls, prefix=()):
        hints = _type_hints(cls)
        default = cls()
        for f in dataclasses.fields(cls):
            path = prefix + (f.name,)
            if path in _DERIVED:
                continue
            hint = hints[f.name]
            if dataclasses.is_dataclass(hint):
                walk(hint, path)
                continue
            val = getattr(default, f.name)
            if isinstance(val, tuple):
                val = list(val)
            tname = hint.__name__ if typing.get_origin(hint) is None and isinstance(hint, type) else str(hint).replace("typing.", "")
            lines.append(f"| `{'.'.join(path)}` | `{tname}` | `{yaml.safe_dump(val, default_flow_style=True).strip().removesuffix('...').strip()}` |")

    walk(RunConfig)
    return "\n".join(lines) + "\n"
