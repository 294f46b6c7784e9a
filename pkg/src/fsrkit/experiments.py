"""Experiment orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import asdict
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .attacks import attack_dataset, pgd_spec
from .config import FORMAT_VERSION, ExperimentConfig, atomic_write_text, dumps, save_config, with_overrides
from .data import Dataset, ingest_cifar10, load_npz, synthetic_dataset
from .errors import ConfigurationError
from .evaluation import (
    ABLATION_ROUTINGS,
    TAPS,
    evaluate,
    feature_probe,
    mask_statistics,
    obfuscation_suite,
    routing_ablation,
)
from .models import build_model, parameter_report
from .training import make_optimizer, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "loss_cls", "loss_sep", "loss_rec", "loss_total", "clean_acc", "adv_acc")


def load_dataset(spec) -> Dataset:
    if spec.kind == "synthetic":
        ds = synthetic_dataset(
            num_classes=spec.num_classes,
            train_per_class=spec.train_per_class,
            test_per_class=spec.test_per_class,
            image_size=spec.image_size,
            seed=spec.seed,
            contrast=spec.contrast,
            noise=spec.noise,
            jitter=spec.jitter,
        )
    elif spec.kind == "cifar10":
        ds = ingest_cifar10(spec.path)
    else:
        ds = load_npz(spec.path)
    return ds.subset(spec.subset_train, spec.subset_test)


def check_data_matches(cfg: ExperimentConfig, ds: Dataset):
    if tuple(cfg.backbone.input_shape) != ds.input_shape:
        raise ConfigurationError(f"backbone input_shape {cfg.backbone.input_shape} does not match data {ds.input_shape}")
    if cfg.backbone.num_classes != ds.num_classes:
        raise ConfigurationError(f"backbone num_classes {cfg.backbone.num_classes} does not match data {ds.num_classes}")


def new_model(cfg: ExperimentConfig):
    torch.manual_seed(cfg.seed)
    return build_model(cfg.backbone, cfg.fsr)


def eval_split(cfg: ExperimentConfig, ds: Dataset):
    n = cfg.eval_examples
    return ds.x_test[:n], ds.y_test[:n]


def envelope(cfg: ExperimentConfig, kind, payload):
    """Wrap a result with the metadata every emitted file carries."""
    return {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "result": payload,
    }


def write_json(path, obj):
    atomic_write_text(path, dumps(obj))


def csv_text(rows, columns=None):
    columns = list(columns or _columns(rows))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k)) for k in columns})
    return buf.getvalue()


def _columns(rows):
    cols = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    return cols


def _cell(v):
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, sort_keys=True)
    if v is None:
        return ""
    return v


def write_csv(path, rows, columns=None):
    atomic_write_text(path, csv_text(rows, columns))


def _tag(cfg, row):
    return {**row, "config_hash": cfg.hash(), "seed": cfg.seed, "format_version": FORMAT_VERSION}


def train_experiment(cfg: ExperimentConfig, out_dir=None, ds=None):
    """Train per ``cfg``; with ``out_dir`` write config, checkpoints and the metrics log there.

    Returns ``(model, history)``.
    """
    ds = ds if ds is not None else load_dataset(cfg.data)
    check_data_matches(cfg, ds)
    model = new_model(cfg)
    optimizer = make_optimizer(model, cfg.schedule)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        save_config(cfg, out / "config.json")

    def on_epoch_end(epoch, opt, metrics):
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            ckpt_io.save(ckpt_io.capture(model, opt, epoch, cfg.hash()), out / f"epoch_{epoch:04d}.ckpt")

    model, history = train(
        model, ds.x_train, ds.y_train, cfg.defense, cfg.schedule, seed=cfg.seed,
        sep_target=cfg.fsr.sep_target, optimizer=optimizer, on_epoch_end=on_epoch_end,
    )
    if out is not None:
        ckpt_io.save(ckpt_io.capture(model, optimizer, cfg.schedule.epochs, cfg.hash()), out / "checkpoint.ckpt")
        write_csv(out / "metrics.csv", [_tag(cfg, asdict(h)) for h in history],
                  list(METRIC_COLUMNS) + ["config_hash", "seed", "format_version"])
    return model, history


def load_model(cfg: ExperimentConfig, path):
    model = build_model(cfg.backbone, cfg.fsr)
    ckpt_io.restore(ckpt_io.load(path), model)
    model.eval()
    return model


def evaluate_experiment(cfg: ExperimentConfig, model, ds=None):
    ds = ds if ds is not None else load_dataset(cfg.data)
    x, y = eval_split(cfg, ds)
    return evaluate(model, x, y, cfg.eval_attacks, seed=cfg.seed)


def probe_attack(cfg: ExperimentConfig):
    for spec in cfg.eval_attacks:
        if spec.name == cfg.probe.attack:
            return spec
    return pgd_spec(20, name=cfg.probe.attack)


def probe_experiment(cfg: ExperimentConfig, model, ds=None, taps=tuple(TAPS)):
    """Weighted k-NN of adversarial test features against the clean training-set features."""
    ds = ds if ds is not None else load_dataset(cfg.data)
    x, y = eval_split(cfg, ds)
    x_adv = attack_dataset(model, x, y, probe_attack(cfg), seed=cfg.seed).x_adv
    return [
        feature_probe(model, ds.x_train, ds.y_train, x_adv, y, tap, cfg.probe.k, cfg.probe.gamma)
        for tap in taps
    ]


def ablation_experiment(cfg: ExperimentConfig, model, ds=None, routings=ABLATION_ROUTINGS):
    ds = ds if ds is not None else load_dataset(cfg.data)
    x, y = eval_split(cfg, ds)
    return routing_ablation(model, x, y, cfg.eval_attacks, routings, seed=cfg.seed)


def ablation_rows(table):
    rows = []
    for routing, rep in table.items():
        row = {"routing": routing, "natural": rep.natural_accuracy}
        row.update(rep.per_attack_accuracy)
        row["ensemble"] = rep.ensemble_accuracy
        rows.append(row)
    return rows


def obfuscation_experiment(cfg: ExperimentConfig, model, ds=None, **kwargs):
    ds = ds if ds is not None else load_dataset(cfg.data)
    x, y = eval_split(cfg, ds)
    eps = cfg.defense.train_attack.epsilon
    return obfuscation_suite(model, x, y, epsilon=eps, seed=cfg.seed, **kwargs)


def expand_grid(grid):
    """Cartesian product of ``{dotted.path: [values]}`` in key order."""
    if not grid:
        raise ConfigurationError("sweep grid is empty")
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigurationError(f"grid axis {k!r} needs a non-empty list of values")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(cfg: ExperimentConfig, grid, ds=None):
    """Train and evaluate every grid point with the shared seed; one flat row per point."""
    points = [(p, with_overrides(cfg, p)) for p in expand_grid(grid)]
    rows = []
    for point, point_cfg in points:
        data = ds if ds is not None and point_cfg.data == cfg.data else load_dataset(point_cfg.data)
        model, history = train_experiment(point_cfg, ds=data)
        report = evaluate_experiment(point_cfg, model, data)
        x, _ = eval_split(point_cfg, data)
        row = dict(point)
        row["natural"] = report.natural_accuracy
        row.update(report.per_attack_accuracy)
        row["ensemble"] = report.ensemble_accuracy
        row.update(mask_statistics(model, x))
        row["final_loss"] = history[-1].loss_total if history else None
        row["params"] = parameter_report(model)["total"]
        rows.append(_tag(point_cfg, row))
    return rows
