"""Experiment configuration: parsing, strict validation, canonical hashing.

One JSON document describes an experiment end to end (dataset, per-layer
quantization settings, training schedule, variation settings, sweep axis).
Unknown fields are rejected everywhere so typos fail loudly, and the
canonical hash is stable across field ordering.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .cim_conv import CimLayerConfig
from .quantizer import Granularity
from .tiler import ArrayShape
from .trainer import TrainMode, TrainSchedule
from .variation import VariationLevel, VariationSpec

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "config_hash", "DEFAULT_CONFIG"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)} in {where}")


def _get(d: dict, key: str, types, where: str, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"missing required field {key!r} in {where}")
        return default
    value = d[key]
    if types is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, types) or isinstance(value, bool) and types is not bool:
        raise ConfigError(f"field {key!r} in {where} has wrong type {type(value).__name__}")
    return value


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    n_train: int = 640
    n_test: int = 256
    size: int = 16
    noise: float = 0.15
    stripe_amp: float = 0.02
    path: str | None = None
    test_path: str | None = None
    classes: tuple[int, ...] | None = None

    @classmethod
    def parse(cls, d: dict) -> "DatasetConfig":
        _check_keys(
            d,
            {"kind", "n_train", "n_test", "size", "noise", "stripe_amp", "path",
             "test_path", "classes"},
            "dataset",
        )
        kind = _get(d, "kind", str, "dataset", default="synthetic")
        if kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'cifar10', got {kind!r}")
        classes = d.get("classes")
        if classes is not None:
            if not isinstance(classes, list) or not all(isinstance(c, int) for c in classes):
                raise ConfigError("dataset.classes must be a list of ints")
            classes = tuple(classes)
        cfg = cls(
            kind=kind,
            n_train=_get(d, "n_train", int, "dataset", default=640),
            n_test=_get(d, "n_test", int, "dataset", default=256),
            size=_get(d, "size", int, "dataset", default=16),
            noise=_get(d, "noise", float, "dataset", default=0.15),
            stripe_amp=_get(d, "stripe_amp", float, "dataset", default=0.02),
            path=_get(d, "path", str, "dataset"),
            test_path=_get(d, "test_path", str, "dataset"),
            classes=classes,
        )
        if cfg.n_train < 1 or cfg.n_test < 1:
            raise ConfigError("dataset sizes must be >= 1")
        if cfg.kind == "cifar10" and not cfg.path:
            raise ConfigError("dataset.kind 'cifar10' requires dataset.path")
        return cfg


_LAYER_KEYS = {
    "w_bits", "a_bits", "p_bits", "cell_bits", "array_rows", "array_cols",
    "w_gran", "p_gran", "stride", "pad",
}


def parse_layer(d: dict, where: str) -> CimLayerConfig:
    _check_keys(d, _LAYER_KEYS, where)
    try:
        return CimLayerConfig(
            w_bits=_get(d, "w_bits", int, where, default=4),
            a_bits=_get(d, "a_bits", int, where, default=4),
            p_bits=_get(d, "p_bits", int, where, default=4),
            cell_bits=_get(d, "cell_bits", int, where, default=2),
            array=ArrayShape(
                _get(d, "array_rows", int, where, default=16),
                _get(d, "array_cols", int, where, default=16),
            ),
            w_gran=Granularity.parse(_get(d, "w_gran", str, where, default="column")),
            p_gran=Granularity.parse(_get(d, "p_gran", str, where, default="column")),
            stride=_get(d, "stride", int, where, default=1),
            pad=_get(d, "pad", int, where, default=0),
        )
    except ValueError as e:
        raise ConfigError(f"invalid layer config in {where}: {e}") from e


@dataclass
class ModelConfig:
    conv_channels: list[int] = field(default_factory=lambda: [8, 8])
    kernel: int = 3
    pool: int = 2
    n_classes: int = 2
    layers: list[CimLayerConfig] = field(default_factory=list)

    @classmethod
    def parse(cls, d: dict) -> "ModelConfig":
        _check_keys(d, {"conv_channels", "kernel", "pool", "n_classes", "layers"}, "model")
        channels = d.get("conv_channels", [8, 8])
        if not isinstance(channels, list) or not all(isinstance(c, int) for c in channels):
            raise ConfigError("model.conv_channels must be a list of ints")
        raw_layers = d.get("layers")
        if raw_layers is None:
            raise ConfigError("model.layers is required (one entry per conv layer)")
        if not isinstance(raw_layers, list) or len(raw_layers) != len(channels):
            raise ConfigError("model.layers must list one layer config per conv channel")
        layers = [parse_layer(ld, f"model.layers[{i}]") for i, ld in enumerate(raw_layers)]
        cfg = cls(
            conv_channels=channels,
            kernel=_get(d, "kernel", int, "model", default=3),
            pool=_get(d, "pool", int, "model", default=2),
            n_classes=_get(d, "n_classes", int, "model", default=2),
            layers=layers,
        )
        if cfg.kernel < 1 or cfg.pool < 1 or cfg.n_classes < 2:
            raise ConfigError("invalid model geometry")
        return cfg


def parse_schedule(d: dict) -> TrainSchedule:
    _check_keys(
        d,
        {"mode", "stage1_epochs", "stage2_epochs", "lr", "momentum", "batch_size",
         "scale_lr_factor", "weight_decay", "lr_decay_factor", "lr_decay_every"},
        "train",
    )
    try:
        return TrainSchedule(
            mode=_get(d, "mode", str, "train", default=TrainMode.ONE_STAGE),
            stage1_epochs=_get(d, "stage1_epochs", int, "train", default=24),
            stage2_epochs=_get(d, "stage2_epochs", int, "train", default=0),
            lr=_get(d, "lr", float, "train", default=0.05),
            momentum=_get(d, "momentum", float, "train", default=0.9),
            batch_size=_get(d, "batch_size", int, "train", default=32),
            scale_lr_factor=_get(d, "scale_lr_factor", float, "train", default=0.1),
            weight_decay=_get(d, "weight_decay", float, "train", default=5e-4),
            lr_decay_factor=_get(d, "lr_decay_factor", float, "train", default=0.3),
            lr_decay_every=_get(d, "lr_decay_every", int, "train", default=8),
        )
    except ValueError as e:
        raise ConfigError(f"invalid train schedule: {e}") from e


def parse_variation(d: dict) -> tuple[VariationSpec, list[float]]:
    _check_keys(d, {"sigma", "level", "seed", "trials", "sigmas"}, "variation")
    sigmas = d.get("sigmas", [0.0, 0.1, 0.2, 0.3, 0.4])
    if not isinstance(sigmas, list) or not all(
        isinstance(s, (int, float)) and not isinstance(s, bool) for s in sigmas
    ):
        raise ConfigError("variation.sigmas must be a list of numbers")
    try:
        spec = VariationSpec(
            sigma=_get(d, "sigma", float, "variation", default=0.0),
            level=VariationLevel.parse(_get(d, "level", str, "variation", default="weight")),
            seed=_get(d, "seed", int, "variation", default=0),
            trials=_get(d, "trials", int, "variation", default=5),
        )
    except ValueError as e:
        raise ConfigError(f"invalid variation spec: {e}") from e
    return spec, [float(s) for s in sigmas]


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainSchedule
    variation: VariationSpec
    sigmas: list[float]
    sweep_axis: str
    sweep_values: list | None
    checkpoint: str | None
    resume: str | None
    raw: dict

    @property
    def input_shape(self) -> tuple[int, int, int]:
        if self.dataset.kind == "cifar10":
            return (3, 32, 32)
        return (1, self.dataset.size, self.dataset.size)


_TOP_KEYS = {
    "seed", "out_dir", "dataset", "model", "train", "variation", "sweep",
    "checkpoint", "resume",
}


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    sweep = raw.get("sweep", {})
    if not isinstance(sweep, dict):
        raise ConfigError("sweep must be an object")
    _check_keys(sweep, {"axis", "values"}, "sweep")
    axis = _get(sweep, "axis", str, "sweep", default="granularity")
    if axis not in ("granularity", "sigma", "p_bits"):
        raise ConfigError(f"sweep.axis must be granularity|sigma|p_bits, got {axis!r}")
    values = sweep.get("values")
    if values is not None and not isinstance(values, list):
        raise ConfigError("sweep.values must be a list")
    cfg = ExperimentConfig(
        seed=_get(raw, "seed", int, "config", default=0),
        out_dir=_get(raw, "out_dir", str, "config", default="out"),
        dataset=DatasetConfig.parse(raw.get("dataset", {})),
        model=ModelConfig.parse(raw.get("model", {})),
        train=parse_schedule(raw.get("train", {})),
        variation=parse_variation(raw.get("variation", {}))[0],
        sigmas=parse_variation(raw.get("variation", {}))[1],
        sweep_axis=axis,
        sweep_values=values,
        checkpoint=_get(raw, "checkpoint", str, "config"),
        resume=_get(raw, "resume", str, "config"),
        raw=raw,
    )
    return cfg


def config_hash(raw: dict) -> str:
    """Stable hash of the semantic content (key order never matters)."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def apply_override(raw: dict, dotted: str, value: str) -> None:
    """Set raw[a][b]... = parsed(value) for an override like a.b=... ."""
    path = dotted.split(".")
    node = raw
    for part in path[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    try:
        node[path[-1]] = json.loads(value)
    except json.JSONDecodeError:
        node[path[-1]] = value


DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "out_dir": "out",
    "dataset": {"kind": "synthetic", "n_train": 640, "n_test": 256},
    "model": {
        "conv_channels": [8, 8],
        "kernel": 3,
        "pool": 2,
        "n_classes": 2,
        "layers": [
            {"w_bits": 4, "a_bits": 4, "p_bits": 4, "cell_bits": 2,
             "array_rows": 16, "array_cols": 16, "w_gran": "column",
             "p_gran": "column", "stride": 2, "pad": 1},
            {"w_bits": 4, "a_bits": 4, "p_bits": 4, "cell_bits": 2,
             "array_rows": 16, "array_cols": 16, "w_gran": "column",
             "p_gran": "column", "stride": 1, "pad": 1},
        ],
    },
    "train": {"mode": "one_stage", "stage1_epochs": 24, "stage2_epochs": 0},
    "variation": {"sigma": 0.0, "trials": 5},
    "sweep": {"axis": "granularity"},
}
