"""Run configuration and its flat dotted-key file format.

A config file is a flat YAML mapping whose keys mirror the RunConfig field
names, with dots for nesting::

    seed: 7
    epochs.drst: 40
    ablations.no_ccl: true
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .ccl.model import Ablations
from .drst.model import DrstArch, LossWeights


@dataclass
class Epochs:
    drst: int = 200
    source: int = 100
    joint: int = 800


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999


@dataclass
class SegOptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    schedule: str = "none"


@dataclass
class SegArch:
    encoder_depth: int = 4
    base_channels: int = 16


@dataclass
class DataConfig:
    root: Optional[str] = None
    split_seed: int = 0
    test_count: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 384
    batch_size: int = 4
    epochs: Epochs = field(default_factory=Epochs)
    tau: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seg_optimizer: SegOptimizerConfig = field(default_factory=SegOptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ablations: Ablations = field(default_factory=Ablations)
    drst: DrstArch = field(default_factory=DrstArch)
    seg: SegArch = field(default_factory=SegArch)
    data: DataConfig = field(default_factory=DataConfig)
    invert_target: bool = False
    cotrain_drst: bool = False
    cache_translations: bool = False
    deterministic: bool = False
    out_dir: str = "runs/dcda"

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)


def _hints(cls):
    return typing.get_type_hints(cls)


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    hints = _hints(type(obj))
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(hints[f.name]):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _coerce(tp, value, key):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        tp = args[0]
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise TypeError(f"{key}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise TypeError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        return str(value)
    return value


def from_flat(flat: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply dotted-key overrides on top of ``base`` (defaults if omitted)."""
    current = flatten(base or RunConfig())
    unknown = set(flat) - set(current)
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    current.update(flat)
    return _build(RunConfig, current, "")


def _build(cls, flat, prefix):
    hints = _hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, flat, key + ".")
        else:
            kwargs[f.name] = _coerce(tp, flat[key], key)
    return cls(**kwargs)


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise TypeError("config file must be a flat key: value mapping")
    return from_flat(data, base)


def serialize(config: RunConfig) -> str:
    return yaml.safe_dump(flatten(config), sort_keys=True, default_flow_style=False)


def normalize(text: str) -> str:
    """Canonical full form of a config document (defaults filled, keys sorted)."""
    return serialize(parse(text))


def load(path, base: RunConfig | None = None) -> RunConfig:
    return parse(Path(path).read_text(), base)


def save(config: RunConfig, path) -> None:
    Path(path).write_text(serialize(config))


def replace(config: RunConfig, **flat) -> RunConfig:
    """Copy with dotted-key overrides; pass keys with ``__`` for dots, e.g. ``epochs__drst=2``."""
    return from_flat({k.replace("__", "."): v for k, v in flat.items()}, config)
