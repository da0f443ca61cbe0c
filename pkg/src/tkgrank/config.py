"""Declarative run configuration.

One YAML (or JSON) document drives every pipeline command. Unknown keys are
rejected, flags may override single fields via dotted paths, and the full
resolved config (with its seed) is embedded in every artifact a command
writes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, get_args, get_origin

import yaml

from .errors import ConfigError


@dataclass
class PathsConfig:
    prices_dir: str = ""
    nodes: str = ""
    relations: str = ""
    out_dir: str = "runs/run"


@dataclass
class DataConfig:
    window: int = 16
    deltas: tuple[int, ...] = (1, 5, 20)
    min_rows: int = 2800
    normalizer: str = "pre_window"  # or "window_start"


@dataclass
class PhasesConfig:
    n_phases: int = 24
    train: int = 450
    val: int = 50
    test: int = 100
    stride: int = 100
    first_train: int = 250


@dataclass
class DimsConfig:
    d_s: int = 20
    d_tpp: int = 128
    d_r: int = 16
    seq_heads: int = 2
    seq_layers: int = 2
    rel_heads: int = 2
    rel_layers: int = 2


@dataclass
class HawkesConfig:
    lr: float = 1e-4
    epochs: int = 5
    negatives: int = 5
    margin: float = 1.0
    batch_size: int = 128
    max_history: int = 32


@dataclass
class TrainingConfig:
    lr: float = 1e-5
    epochs: int = 10
    momentum: float = 0.0
    temperature: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 1.0
    k: int = 5
    val_k: int = 5
    rescale_bce: bool = True
    pooling: str = "mean"


@dataclass
class BacktestConfig:
    ks: tuple[int, ...] = (1, 5)
    risk_free: float | tuple[float, ...] = 0.0  # annual %, scalar or per phase
    graded_relevance: bool = False
    counterfactual_remove: tuple[str, ...] = ()


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "FULL"
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    phases: PhasesConfig = field(default_factory=PhasesConfig)
    dims: DimsConfig = field(default_factory=DimsConfig)
    hawkes: HawkesConfig = field(default_factory=HawkesConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    backtest: BacktestConfig = field(default_factory=BacktestConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> None:
        from .ranker import VARIANTS

        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.data.window < 1:
            raise ConfigError("data.window must be >= 1")
        if not self.data.deltas or any(d < 1 for d in self.data.deltas):
            raise ConfigError("data.deltas must be positive")
        if self.data.normalizer not in ("pre_window", "window_start"):
            raise ConfigError(f"unknown data.normalizer {self.data.normalizer!r}")
        if self.dims.d_s % self.dims.seq_heads:
            raise ConfigError("dims.d_s must be divisible by dims.seq_heads")
        if self.dims.d_r % self.dims.rel_heads:
            raise ConfigError("dims.d_r must be divisible by dims.rel_heads")
        if not self.backtest.ks or any(k < 1 for k in self.backtest.ks):
            raise ConfigError("backtest.ks must be positive")
        if self.training.k < 1:
            raise ConfigError("training.k must be >= 1")


def _coerce(value: Any, target_type: Any, where: str) -> Any:
    origin = get_origin(target_type)
    if target_type in (int,):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        return value
    if target_type in (float,):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected list, got {value!r}")
        elem = get_args(target_type)[0]
        return tuple(_coerce(v, elem, f"{where}[{i}]") for i, v in enumerate(value))
    # union (e.g. float | tuple[float, ...]): try each arm in order
    args = get_args(target_type)
    if args:
        for arm in args:
            try:
                return _coerce(value, arm, where)
            except ConfigError:
                continue
        raise ConfigError(f"{where}: {value!r} fits none of {args}")
    return value


_HINTS_CACHE: dict[type, dict[str, Any]] = {}


def _field_types(cls: type) -> dict[str, Any]:
    # dataclass field.type is a string under `from __future__ import
    # annotations`; resolve once per class.
    import typing

    if cls not in _HINTS_CACHE:
        _HINTS_CACHE[cls] = typing.get_type_hints(cls)
    return _HINTS_CACHE[cls]


def _merge_into(obj: Any, data: dict, where: str) -> Any:
    hints = _field_types(type(obj))
    names = {f.name for f in fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(
                f"unknown config key {where + '.' if where else ''}{key}"
            )
        current = getattr(obj, key)
        loc = f"{where + '.' if where else ''}{key}"
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{loc}: expected a mapping")
            _merge_into(current, value, loc)
        else:
            setattr(obj, key, _coerce(value, hints[key], loc))
    return obj


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    cfg = RunConfig()
    _merge_into(cfg, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is None:
        data = {}
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides; values parse as YAML scalars."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section {part!r} in {dotted!r}")
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return from_dict(data)
