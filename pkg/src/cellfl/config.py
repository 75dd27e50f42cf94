"""Experiment configuration with validated defaults and JSON round-tripping."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import UsageError
from .nn import ModelSpec, lenet5, mlp

PROTOCOLS = ("cell", "lotteryfl", "fedavg", "standalone")
AGGREGATIONS = ("zeros", "mask_normalized")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" | "cifar10"
    path: str | None = None
    num_classes: int = 10
    dim: int = 32
    per_class_train: int = 600
    per_class_test: int = 100
    cluster_sep: float = 2.5

    def validate(self) -> None:
        if self.kind not in ("synthetic", "cifar10"):
            raise UsageError(f"dataset.kind must be 'synthetic' or 'cifar10', got {self.kind!r}")
        if self.kind == "cifar10" and not self.path:
            raise UsageError("dataset.path is required for cifar10")
        for name in ("num_classes", "dim", "per_class_train", "per_class_test"):
            if getattr(self, name) < 1:
                raise UsageError(f"dataset.{name} must be >= 1")
        if self.num_classes < 2:
            raise UsageError("dataset.num_classes must be >= 2")
        if self.kind == "synthetic" and self.dim < self.num_classes:
            raise UsageError("dataset.dim must be >= dataset.num_classes")
        if not self.cluster_sep > 0:
            raise UsageError("dataset.cluster_sep must be > 0")


@dataclass
class ModelConfig:
    kind: str = "mlp"  # "mlp" | "lenet5" | "layers"
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    layers: list[dict] | None = None

    def validate(self) -> None:
        if self.kind not in ("mlp", "lenet5", "layers"):
            raise UsageError(f"model.kind must be mlp, lenet5 or layers, got {self.kind!r}")
        if any(h < 1 for h in self.hidden):
            raise UsageError("model.hidden sizes must be >= 1")
        if self.kind == "layers" and not self.layers:
            raise UsageError("model.layers is required when model.kind is 'layers'")

    def build(self, sample_shape: tuple[int, ...], num_classes: int) -> ModelSpec:
        if self.kind == "mlp":
            return mlp(math.prod(sample_shape), tuple(self.hidden), num_classes)
        if self.kind == "lenet5":
            if len(sample_shape) != 3 or sample_shape[1] != sample_shape[2]:
                raise UsageError(f"lenet5 needs square (C, H, W) inputs, got {sample_shape}")
            return lenet5(num_classes, sample_shape[0], sample_shape[1])
        return ModelSpec.from_dicts(self.layers)


@dataclass
class ExperimentConfig:
    protocol: str
    num_users: int = 20
    C: float = 1.0
    samples_per_user: int = 100
    labels_per_user: int = 3
    val_fraction: float = 0.2
    local_epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    prune_step: float = 0.2
    prune_target: float = 0.8
    threshold_default: float = 0.5
    threshold_decay: float = 0.9
    defer_rate_on_failure: bool = False
    rewind_at_target: bool = False
    prune_scope: str = "global"
    aggregation: str = "zeros"
    rounds: int = 40
    seed: int = 0
    out_dir: str = "runs/out"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "ExperimentConfig":
        if self.protocol not in PROTOCOLS:
            raise UsageError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        checks = [
            ("num_users", self.num_users >= 1, ">= 1"),
            ("C", 0.0 <= self.C <= 1.0, "in [0, 1]"),
            ("samples_per_user", self.samples_per_user >= 2, ">= 2"),
            ("labels_per_user", self.labels_per_user >= 1, ">= 1"),
            ("val_fraction", 0.0 < self.val_fraction < 1.0, "in (0, 1)"),
            ("local_epochs", self.local_epochs >= 0, ">= 0"),
            ("batch_size", self.batch_size >= 1, ">= 1"),
            ("lr", self.lr > 0, "> 0"),
            ("prune_step", 0.0 < self.prune_step < 1.0, "in (0, 1)"),
            ("prune_target", 0.0 < self.prune_target < 1.0, "in (0, 1)"),
            ("threshold_default", 0.0 <= self.threshold_default <= 1.0, "in [0, 1]"),
            ("threshold_decay", 0.0 <= self.threshold_decay < 1.0, "in [0, 1)"),
            ("rounds", self.rounds >= 0, ">= 0"),
            ("seed", 0 <= self.seed < 2**64, "in [0, 2^64)"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise UsageError(f"{key} must be {rule}, got {getattr(self, key)!r}")
        if self.prune_scope not in ("global", "layer"):
            raise UsageError(f"prune_scope must be 'global' or 'layer', got {self.prune_scope!r}")
        if self.aggregation not in AGGREGATIONS:
            raise UsageError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.labels_per_user > self.dataset.num_classes and self.dataset.kind == "synthetic":
            raise UsageError("labels_per_user must be <= dataset.num_classes")
        self.dataset.validate()
        self.model.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _coerce(section: str, key: str, value: Any, annotation: str) -> Any:
    where = f"{section}{key}"
    if annotation in ("str | None",):
        if value is None or isinstance(value, str):
            return value
        raise UsageError(f"{where} must be a string or null")
    if annotation == "bool":
        if not isinstance(value, bool):
            raise UsageError(f"{where} must be true or false, got {value!r}")
        return value
    if annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{where} must be an integer, got {value!r}")
        return value
    if annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{where} must be a number, got {value!r}")
        return float(value)
    if annotation == "str":
        if not isinstance(value, str):
            raise UsageError(f"{where} must be a string, got {value!r}")
        return value
    if annotation == "list[int]":
        if not isinstance(value, list) or any(
            isinstance(v, bool) or not isinstance(v, int) for v in value
        ):
            raise UsageError(f"{where} must be a list of integers")
        return list(value)
    if annotation == "list[dict] | None":
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(v, dict) for v in value):
            raise UsageError(f"{where} must be a list of layer tables")
        return [dict(v) for v in value]
    raise AssertionError(annotation)


def _build(cls, raw: dict, section: str = ""):
    if not isinstance(raw, dict):
        raise UsageError(f"{section.rstrip('.') or 'config'} must be a key-value table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(section + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        ann = known[name].type
        if ann == "DatasetConfig":
            kwargs[name] = _build(DatasetConfig, value, "dataset.")
        elif ann == "ModelConfig":
            kwargs[name] = _build(ModelConfig, value, "model.")
        else:
            kwargs[name] = _coerce(section, name, value, ann)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise UsageError("config must be a key-value table")
    if "protocol" not in raw:
        raise UsageError("missing required key: protocol")
    cfg = _build(ExperimentConfig, raw)
    cfg.protocol = cfg.protocol.lower()
    return cfg.validate()


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load a JSON config file and validate every value against its default type."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    if not text.strip():
        raw: dict = {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: malformed JSON ({exc})") from None
    return config_from_dict(raw)
