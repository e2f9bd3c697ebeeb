"""Run configuration shared by every CLI subcommand.

A config file is JSON whose sections mirror :class:`RunConfig`. Missing keys
keep their defaults; unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SceneSpec
from .errors import ConfigError
from .netgraph.train import TrainConfig
from .pruning import IterationConfig


@dataclass
class PathsConfig:
    dataset: str = "data"  # raw dataset directory (gen-data output)
    prepared: str = "prepared"  # preprocessed cubes (preprocess output)
    model: str = "model"
    calib: str | None = None  # prepared directory used for quantization calibration
    workdir: str = "work"


@dataclass
class ModelConfig:
    depth: int = 5
    init_filters: int = 32
    dropout: float = 0.2


@dataclass
class PrepConfig:
    folds: int = 5
    round: int = 0  # fold-rotation round used for train/val/test
    coverage: float = 0.9995  # channel-clipping quantile


@dataclass
class QuantConfig:
    cle: bool = True
    window: int = 4  # Min-MSE exponents tried below the Min-Max one
    calib_images: int = 32


@dataclass
class BenchConfig:
    stages: int = 3
    repeat: int = 100
    warmup: int = 3


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pruning: IterationConfig = field(default_factory=IterationConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls.from_dict(doc)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if hasattr(obj, "value"):  # enums
        return obj.value
    return obj


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in d.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, f"{where}.{k}")
        elif typing.get_origin(t) is tuple and isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
