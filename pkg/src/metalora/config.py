"""Run configuration: nested dataclasses loaded strictly from JSON.

Unknown keys are rejected at every level and all cross-field checks run in
:meth:`RunConfig.validate` before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .adapters import ADAPTER_TYPES
from .data import TaskSetSpec, check_margin
from .meta_net import ACTIVATIONS, EXTRACTOR_KINDS

VARIANTS = ("original", "multi_lora") + tuple(ADAPTER_TYPES)
DISPLAY_NAMES = {
    "original": "Original",
    "lora": "LoRA",
    "conv_lora": "LoRA",
    "multi_lora": "Multi-LoRA (per-task)",
    "meta_cp": "Meta-LoRA CP",
    "meta_tr": "Meta-LoRA TR",
    "conv_meta_cp": "Meta-LoRA CP",
    "conv_meta_tr": "Meta-LoRA TR",
}


class ConfigError(ValueError):
    pass


@dataclass
class AdapterConfig:
    variant: str = "conv_lora"
    rank: int = 2
    target: str = "conv"
    scale: float = 1.0
    name: str | None = None

    @property
    def label(self) -> str:
        return self.name or DISPLAY_NAMES[self.variant]

    @property
    def is_meta(self) -> bool:
        return "meta" in self.variant


@dataclass
class GeometryConfig:
    kernel_size: int = 3
    features: int = 8
    activation: str = "tanh"


@dataclass
class MappingConfig:
    hidden: int | None = None  # default 2 * rank
    depth: int = 2
    activation: str = "tanh"
    output_bias: str = "neutral"
    output_gain: float = 0.1
    seed_mode: str = "per_sample"


@dataclass
class ExtractorConfig:
    kind: str = "pooled-conv"
    features: int = 8
    kernel_size: int = 3


@dataclass
class OptimConfig:
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 20


@dataclass
class PretrainConfig:
    optimizer: str = "adam"
    lr: float = 0.02
    batch_size: int = 32
    epochs: int = 30


@dataclass
class RunConfig:
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    arms: list[AdapterConfig] = field(default_factory=list)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    tasks: TaskSetSpec = field(default_factory=TaskSetSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    budget_tolerance: float = 0.1
    knn_ks: list[int] = field(default_factory=lambda: [5, 10])
    out: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d, "config")
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for a in [self.adapter] + list(self.arms):
            _check_adapter(a)
        g = self.geometry
        if g.kernel_size < 1 or g.kernel_size % 2 == 0:
            raise ConfigError("geometry.kernel_size must be a positive odd number")
        if g.features < 1:
            raise ConfigError("geometry.features must be >= 1")
        if g.activation not in ACTIVATIONS:
            raise ConfigError(f"geometry.activation must be one of {ACTIVATIONS}")
        m = self.mapping
        if m.depth < 1 or (m.hidden is not None and m.hidden < 1):
            raise ConfigError("mapping.depth and mapping.hidden must be >= 1")
        if m.activation not in ACTIVATIONS:
            raise ConfigError(f"mapping.activation must be one of {ACTIVATIONS}")
        if m.output_bias not in ("neutral", "zeros"):
            raise ConfigError("mapping.output_bias must be 'neutral' or 'zeros'")
        if m.seed_mode not in ("per_sample", "batch_mean"):
            raise ConfigError("mapping.seed_mode must be 'per_sample' or 'batch_mean'")
        e = self.extractor
        if e.kind not in EXTRACTOR_KINDS:
            raise ConfigError(f"extractor.kind must be one of {EXTRACTOR_KINDS}")
        if e.kind == "pooled-conv" and (e.kernel_size % 2 == 0 or e.features < 1):
            raise ConfigError("pooled-conv extractor needs odd kernel_size and features >= 1")
        for name, o in (("optim", self.optim), ("pretrain", self.pretrain)):
            if o.optimizer not in ("sgd", "adam"):
                raise ConfigError(f"{name}.optimizer must be 'sgd' or 'adam'")
            if o.lr < 0 or o.batch_size < 1 or o.epochs < 0:
                raise ConfigError(f"{name}: need lr >= 0, batch_size >= 1, epochs >= 0")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(k < 1 for k in self.knn_ks):
            raise ConfigError("knn_ks must be positive")
        if not 0 <= self.budget_tolerance:
            raise ConfigError("budget_tolerance must be nonnegative")
        try:
            check_margin(self.tasks)
        except ValueError as exc:
            raise ConfigError(f"tasks: {exc}") from exc


def _check_adapter(a: AdapterConfig) -> None:
    if a.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {a.variant!r}; choose from {VARIANTS}")
    if a.rank < 1:
        raise ConfigError("rank must be >= 1")
    if a.target not in ("conv", "head"):
        raise ConfigError("target must be 'conv' or 'head'")
    if a.variant.startswith("conv_") and a.target != "conv":
        raise ConfigError(f"{a.variant} can only target the conv layer")


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in d.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value
