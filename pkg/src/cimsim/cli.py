"""Experiment runner: infer / train / sweep / histogram / cost-report.

One JSON config drives everything; outputs are schema-stable CSV files that
are byte-identical across repeated runs of the same config and seed (the
only timestamp lives in record.json, never in a CSV).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import cost_model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ExperimentConfig,
    apply_override,
    config_hash,
    parse_config,
)
from .data import Dataset, load_cifar10_binary, synthetic_blobs
from .quantizer import Granularity, calibrate_scales
from .trainer import ToyModel, evaluate, train
from .variation import VariationLevel, VariationSpec, sample_theta

__all__ = ["main", "load_dataset", "build_model", "run_command"]

GRANULARITIES = [Granularity.LAYER, Granularity.ARRAY, Granularity.COLUMN]


# -- assembly ----------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train/test datasets per the config; synthetic streams derive from the seed."""
    d = cfg.dataset
    if d.kind == "synthetic":
        train_ds = synthetic_blobs(
            d.n_train, seed=2 * cfg.seed, size=d.size, noise=d.noise,
            stripe_amp=d.stripe_amp,
        )
        test_ds = synthetic_blobs(
            d.n_test, seed=2 * cfg.seed + 1, size=d.size, noise=d.noise,
            stripe_amp=d.stripe_amp,
        )
        return train_ds, test_ds
    if d.test_path:
        train_ds = load_cifar10_binary(d.path, classes=d.classes, limit=d.n_train)
        test_ds = load_cifar10_binary(d.test_path, classes=d.classes, limit=d.n_test)
    else:
        full = load_cifar10_binary(d.path, classes=d.classes)
        if len(full) < d.n_train + d.n_test:
            raise ConfigError(
                f"dataset at {d.path} has {len(full)} usable records, need "
                f"{d.n_train + d.n_test}"
            )
        train_ds = Dataset(full.images[: d.n_train], full.labels[: d.n_train])
        test_ds = Dataset(
            full.images[d.n_train : d.n_train + d.n_test],
            full.labels[d.n_train : d.n_train + d.n_test],
        )
    return train_ds, test_ds


def build_model(cfg: ExperimentConfig, quant_enabled: bool = True) -> ToyModel:
    return ToyModel(
        conv_channels=cfg.model.conv_channels,
        layer_cfgs=cfg.model.layers,
        kernel=cfg.model.kernel,
        input_shape=cfg.input_shape,
        pool=cfg.model.pool,
        n_classes=cfg.model.n_classes,
        seed=cfg.seed,
        quant_enabled=quant_enabled,
    )


def model_state(model: ToyModel, velocity: dict | None = None) -> tuple[dict, dict]:
    params = {k: v.copy() for k, v in model.params().items()}
    if velocity:
        params.update({f"momentum/{k}": v.copy() for k, v in velocity.items()})
    flags = {
        layer.name: {"s_a_ready": layer.s_a_ready, "s_p_ready": layer.s_p_ready}
        for layer in model.convs
    }
    return params, flags


def restore_model(model: ToyModel, params: dict, extra: dict) -> dict:
    velocity = {}
    for name, value in params.items():
        if name.startswith("momentum/"):
            velocity[name[len("momentum/") :]] = value.astype(np.float32)
        else:
            model.set_param(name, value)
    for layer in model.convs:
        flags = extra.get("flags", {}).get(layer.name, {})
        layer.s_a_ready = bool(flags.get("s_a_ready", False))
        layer.s_p_ready = bool(flags.get("s_p_ready", False))
    model.psum_active = bool(extra.get("psum_active", False))
    return velocity


def calibrate_for_inference(model: ToyModel, batch: np.ndarray) -> None:
    """Saturating activation/psum calibration, layer by layer."""
    h = np.asarray(batch, dtype=np.float64)
    for layer in model.convs:
        if layer.quant_enabled and not layer.s_a_ready:
            st = calibrate_scales(h, layer.aspec, np.zeros((), dtype=np.int64))
            layer.s_a = st.values.astype(np.float32)
            layer.s_a_ready = True
        if layer.quant_enabled and not layer.s_p_ready:
            layer.calibrate_psum_scales(h)
        pre, _ = layer.forward(h, psum_active=False)
        h = np.where(pre > 0, pre, 0.0)
    model.psum_active = True


def make_theta(model: ToyModel, sigma: float, rng, level: VariationLevel) -> dict:
    """One variation draw per conv layer from a single trial stream."""
    theta = {}
    for i, layer in enumerate(model.convs):
        shape = layer.weight.shape
        if level is VariationLevel.CELL:
            shape = (layer.n_split,) + shape
        theta[i] = sample_theta(shape, sigma, rng)
    return theta


# -- output helpers ----------------------------------------------------------


def write_csv(path: str, header: list[str], rows: list[dict]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in header})


def write_record(cfg: ExperimentConfig, metrics: dict[str, float]) -> None:
    record = {
        "config_hash": config_hash(cfg.raw),
        "seed": cfg.seed,
        "records": [
            {"metric": k, "value": v, "seed": cfg.seed} for k, v in sorted(metrics.items())
        ],
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = os.path.join(cfg.out_dir, "record.json")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(path, "w") as f:
        json.dump(record, f, indent=1, sort_keys=True)


def overhead_rows(cfg: ExperimentConfig) -> list[dict]:
    model = build_model(cfg)
    layer_plans = [
        (layer.name, layer.cfg.w_gran, layer.cfg.p_gran, layer.plan, layer.n_split)
        for layer in model.convs
    ]
    return cost_model.report(layer_plans).csv_rows()


COST_HEADER = [
    "layer", "w_gran", "p_gran", "n_array", "n_oc", "n_split", "dequant_mults",
    "stored_fused",
]


# -- commands ----------------------------------------------------------------


def cmd_cost_report(cfg: ExperimentConfig) -> None:
    rows = overhead_rows(cfg)
    write_csv(os.path.join(cfg.out_dir, "cost_report.csv"), COST_HEADER, rows)
    write_record(cfg, {"total_dequant_mults": sum(r["dequant_mults"] for r in rows)})


def _prepared_model(cfg: ExperimentConfig, test_ds: Dataset) -> ToyModel:
    model = build_model(cfg)
    if cfg.checkpoint:
        params, extra = load_checkpoint(cfg.checkpoint)
        restore_model(model, params, extra)
        model.psum_active = True
    else:
        calibrate_for_inference(model, test_ds.images[: min(64, len(test_ds))])
    return model


def cmd_infer(cfg: ExperimentConfig) -> None:
    _, test_ds = load_dataset(cfg)
    model = _prepared_model(cfg, test_ds)
    acc = evaluate(model, test_ds)
    traces = []
    x = test_ds.images[: min(64, len(test_ds))]
    h = x
    for layer in model.convs:
        pre, cache = layer.forward(h, psum_active=True)
        traces.append(cache["trace"])
        h = np.where(pre > 0, pre, 0.0)
    trace_rows = []
    for i, tr in enumerate(traces):
        for c in range(tr.n_columns):
            trace_rows.append(
                {
                    "layer": f"conv{i}",
                    "column_id": c,
                    "array": int(tr.column_array[c]),
                    "split": int(tr.column_split[c]),
                    "w_scale": float(tr.w_scale[c]),
                    "p_scale": float(tr.p_scale[c]),
                    "samples": int(tr.sample_count[c]),
                    "clips": int(tr.clip_count[c]),
                    "psum_min": float(tr.psum_min[c]),
                    "psum_max": float(tr.psum_max[c]),
                }
            )
    write_csv(
        os.path.join(cfg.out_dir, "trace_summary.csv"),
        ["layer", "column_id", "array", "split", "w_scale", "p_scale", "samples",
         "clips", "psum_min", "psum_max"],
        trace_rows,
    )
    metrics_rows = [
        {"metric": "accuracy", "value": acc},
        {"metric": "dequant_mults", "value": sum(t.dequant_mults for t in traces)},
        {"metric": "trace_columns", "value": sum(t.n_columns for t in traces)},
    ]
    write_csv(os.path.join(cfg.out_dir, "metrics.csv"), ["metric", "value"], metrics_rows)
    write_record(cfg, {"accuracy": acc})


TRAIN_HEADER = ["epoch", "stage", "psum_active", "loss", "test_acc", "steps",
                "psum_clips", "lr"]


def cmd_train(cfg: ExperimentConfig) -> list[dict]:
    train_ds, test_ds = load_dataset(cfg)
    model = build_model(cfg)
    start_epoch = 0
    velocity = None
    if cfg.resume:
        params, extra = load_checkpoint(cfg.resume)
        velocity = restore_model(model, params, extra)
        start_epoch = int(extra.get("epoch", 0))
    velocity = velocity or {k: np.zeros_like(v) for k, v in model.params().items()}
    log = train(model, (train_ds, test_ds), cfg.train, seed=cfg.seed,
                start_epoch=start_epoch, velocity=velocity)
    write_csv(os.path.join(cfg.out_dir, "train_log.csv"), TRAIN_HEADER, log)
    params, flags = model_state(model, velocity)
    save_checkpoint(
        os.path.join(cfg.out_dir, "checkpoint"),
        params,
        {"epoch": cfg.train.total_epochs, "flags": flags,
         "psum_active": model.psum_active, "config_hash": config_hash(cfg.raw)},
    )
    best = max((r["test_acc"] for r in log), default=0.0)
    final = log[-1]["test_acc"] if log else 0.0
    write_record(cfg, {"best_acc": best, "final_acc": final})
    return log


def _with_layer_field(cfg: ExperimentConfig, **fields) -> ExperimentConfig:
    layers = [dataclasses.replace(l, **fields) for l in cfg.model.layers]
    model = dataclasses.replace(cfg.model, layers=layers)
    return dataclasses.replace(cfg, model=model)


def cmd_sweep(cfg: ExperimentConfig) -> list[dict]:
    train_ds, test_ds = load_dataset(cfg)
    rows: list[dict] = []
    if cfg.sweep_axis == "granularity":
        for w_gran in GRANULARITIES:
            for p_gran in GRANULARITIES:
                sub = _with_layer_field(cfg, w_gran=w_gran, p_gran=p_gran)
                model = build_model(sub)
                log = train(model, (train_ds, test_ds), sub.train, seed=sub.seed)
                over = overhead_rows(sub)
                rows.append(
                    {
                        "w_gran": w_gran.value,
                        "p_gran": p_gran.value,
                        "best_acc": max(r["test_acc"] for r in log),
                        "final_acc": log[-1]["test_acc"],
                        "dequant_mults": sum(r["dequant_mults"] for r in over),
                        "stored_fused": sum(r["stored_fused"] for r in over),
                    }
                )
        write_csv(
            os.path.join(cfg.out_dir, "sweep_granularity.csv"),
            ["w_gran", "p_gran", "best_acc", "final_acc", "dequant_mults", "stored_fused"],
            rows,
        )
        write_record(cfg, {"sweep_points": float(len(rows))})
        return rows
    if cfg.sweep_axis == "sigma":
        model = build_model(cfg)
        log = train(model, (train_ds, test_ds), cfg.train, seed=cfg.seed)
        spec = VariationSpec(
            sigma=0.0, level=cfg.variation.level,
            seed=cfg.variation.seed or cfg.seed, trials=cfg.variation.trials,
        )

        def eval_at(sigma, rng):
            theta = make_theta(model, sigma, rng, spec.level)
            return evaluate(model, test_ds, theta_by_layer=theta)

        from .variation import variation_sweep

        rows = variation_sweep(eval_at, cfg.sigmas, spec)
        write_csv(
            os.path.join(cfg.out_dir, "sweep_sigma.csv"),
            ["sigma", "mean_accuracy", "std_accuracy", "trials"],
            rows,
        )
        write_record(cfg, {"noise_free_acc": max(r["test_acc"] for r in log)})
        return rows
    # p_bits axis
    values = cfg.sweep_values or [2, 3, 4, 6, 8]
    for p_bits in values:
        if not isinstance(p_bits, int):
            raise ConfigError("sweep.values for p_bits must be integers")
        sub = _with_layer_field(cfg, p_bits=p_bits)
        model = build_model(sub)
        log = train(model, (train_ds, test_ds), sub.train, seed=sub.seed)
        over = overhead_rows(sub)
        rows.append(
            {
                "p_bits": p_bits,
                "best_acc": max(r["test_acc"] for r in log),
                "final_acc": log[-1]["test_acc"],
                "dequant_mults": sum(r["dequant_mults"] for r in over),
            }
        )
    write_csv(
        os.path.join(cfg.out_dir, "sweep_p_bits.csv"),
        ["p_bits", "best_acc", "final_acc", "dequant_mults"],
        rows,
    )
    write_record(cfg, {"sweep_points": float(len(rows))})
    return rows


def cmd_histogram(cfg: ExperimentConfig, layer_index: int) -> None:
    _, test_ds = load_dataset(cfg)
    model = _prepared_model(cfg, test_ds)
    if not 0 <= layer_index < len(model.convs):
        raise ConfigError(f"--layer {layer_index} out of range")
    x = test_ds.images[: min(64, len(test_ds))]
    h = x
    trace = None
    for i, layer in enumerate(model.convs):
        w = layer.weight.astype(np.float64)
        if i == layer_index:
            from . import cim_conv

            _, trace = cim_conv.forward(
                h, w, layer.cfg, layer.scale_tensor_w(),
                scales_p=layer.scale_tensor_p() if layer.s_p_ready else None,
                scales_a=layer.scale_tensor_a() if layer.s_a_ready else None,
                collect_samples=True,
            )
            break
        pre, _ = layer.forward(h, psum_active=True)
        h = np.where(pre > 0, pre, 0.0)
    rows = []
    for col in range(trace.n_columns):
        values, counts = np.unique(trace.samples[col].astype(np.int64), return_counts=True)
        for v, c in zip(values, counts):
            rows.append({"column_id": col, "bin": int(v), "count": int(c)})
    write_csv(
        os.path.join(cfg.out_dir, f"histogram_layer{layer_index}.csv"),
        ["column_id", "bin", "count"],
        rows,
    )
    write_record(cfg, {"histogram_columns": float(trace.n_columns)})


# -- entry point ---------------------------------------------------------------


def run_command(cmd: str, cfg: ExperimentConfig, layer_index: int = 0):
    if cmd == "infer":
        return cmd_infer(cfg)
    if cmd == "train":
        return cmd_train(cfg)
    if cmd == "sweep":
        return cmd_sweep(cfg)
    if cmd == "histogram":
        return cmd_histogram(cfg, layer_index)
    if cmd == "cost-report":
        return cmd_cost_report(cfg)
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cimsim",
        description="Quantized convolution on bit-scalable crossbar arrays",
    )
    parser.add_argument("command", choices=["infer", "train", "sweep", "histogram", "cost-report"])
    parser.add_argument("--config", required=True, help="path to the experiment JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--layer", type=int, default=0, help="layer index for histogram")
    parser.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="dotted-path config override, e.g. train.lr=0.01",
    )
    args = parser.parse_args(argv)
    try:
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        for item in args.override:
            if "=" not in item:
                raise ConfigError(f"--override expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            apply_override(raw, key, value)
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.out is not None:
            raw["out_dir"] = args.out
        cfg = parse_config(raw)
        run_command(args.command, cfg, layer_index=args.layer)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
