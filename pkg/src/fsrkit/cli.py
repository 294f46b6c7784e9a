"""Command-line entry point: ``fsrkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .config import ExperimentConfig, dumps, load_config, with_overrides
from .data import CIFAR_TEST_FILE, save_npz, synthetic_dataset, to_uint8, write_cifar10_batch
from .errors import ConfigurationError, FormatError, TrainingDivergedError
from .evaluation import TAPS
from .plotting import plot_table, read_table, save_figure

log = logging.getLogger("fsrkit")


def _resolve(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["schedule.epochs"] = args.epochs
    if overrides:
        cfg = with_overrides(cfg, overrides)
    out = cfg.resolved_output_dir(getattr(args, "output_dir", None))
    print("resolved config:")
    print(dumps(cfg.to_dict()), end="")
    print(f"seed: {cfg.seed}")
    print(f"config hash: {cfg.hash()}")
    print(f"output dir: {out}")
    return cfg, out


def _checkpoint_path(args, out):
    path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_train(args):
    cfg, out = _resolve(args)
    _, history = ex.train_experiment(cfg, out)
    if history:
        last = history[-1]
        print(f"trained {len(history)} epochs; final loss {last.loss_total:.4f}, clean {last.clean_acc:.2f}%, adv {last.adv_acc:.2f}%")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return 0


def cmd_evaluate(args):
    cfg, out = _resolve(args)
    model = ex.load_model(cfg, _checkpoint_path(args, out))
    report = ex.evaluate_experiment(cfg, model)
    path = Path(args.report) if args.report else out / "report.json"
    ex.write_json(path, ex.envelope(cfg, "robustness_report", report.to_dict()))
    print(json.dumps(report.to_dict()["per_attack_accuracy"], sort_keys=True))
    print(f"natural {report.natural_accuracy:.2f}%  ensemble {report.ensemble_accuracy:.2f}%")
    print(f"report: {path}")
    return 0


def cmd_probe(args):
    cfg, out = _resolve(args)
    overrides = {}
    if args.k is not None:
        overrides["probe.k"] = args.k
    if args.gamma is not None:
        overrides["probe.gamma"] = args.gamma
    if overrides:
        cfg = with_overrides(cfg, overrides)
    model = ex.load_model(cfg, _checkpoint_path(args, out))
    results = ex.probe_experiment(cfg, model, taps=args.taps)
    path = out / "knn_probe.json"
    ex.write_json(path, ex.envelope(cfg, "knn_probe", [r.to_dict() for r in results]))
    for r in results:
        print(f"{r.feature_tap:>14}: {r.k}-NN top-1 {r.top1_accuracy:.2f}% (gamma {r.gamma}, bank {r.bank_size})")
    print(f"results: {path}")
    return 0


def cmd_ablate(args):
    cfg, out = _resolve(args)
    model = ex.load_model(cfg, _checkpoint_path(args, out))
    table = ex.ablation_experiment(cfg, model)
    rows = [ex._tag(cfg, r) for r in ex.ablation_rows(table)]
    ex.write_csv(out / "routing_ablation.csv", rows)
    ex.write_json(out / "routing_ablation.json", ex.envelope(cfg, "routing_ablation", {k: v.to_dict() for k, v in table.items()}))
    for r in rows:
        print(f"{r['routing']:>15}: natural {r['natural']:.2f}%  ensemble {r['ensemble']:.2f}%")
    print(f"table: {out / 'routing_ablation.csv'}")
    return 0


def cmd_sweep(args):
    cfg, out = _resolve(args)
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise FileNotFoundError(f"grid file not found: {grid_path}")
    grid = json.loads(grid_path.read_text())
    rows = ex.sweep(cfg, grid)
    path = Path(args.table) if args.table else out / "sweep.csv"
    ex.write_csv(path, rows)
    print(f"{len(rows)} grid points; table: {path}")
    return 0


def cmd_obfuscation(args):
    cfg, out = _resolve(args)
    model = ex.load_model(cfg, _checkpoint_path(args, out))
    report = ex.obfuscation_experiment(cfg, model)
    ex.write_json(out / "obfuscation.json", ex.envelope(cfg, "obfuscation_suite", report.to_dict()))
    for name, crit in report.criteria.items():
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[crit["passed"]]
        print(f"criterion ({name}): {status}")
    print(f"steps curve: {report.steps_curve}")
    print(f"epsilon curve: {report.epsilon_curve}")
    print(f"unbounded accuracy: {report.unbounded_accuracy:.2f}%")
    return 0 if report.passed else 3


def cmd_plot(args):
    print("resolved config:")
    print(dumps({"table": args.table, "x": args.x, "metrics": args.metrics, "out": args.out}), end="")
    print("seed: n/a (plot is deterministic)")
    columns, rows = read_table(args.table)
    fig = plot_table(columns, rows, x=args.x, metrics=args.metrics, title=args.title)
    out = Path(args.out) if args.out else Path(args.table).with_suffix(".svg")
    save_figure(fig, out)
    print(f"figure: {out}")
    return 0


def cmd_gen_data(args):
    params = {
        "num_classes": args.classes,
        "train_per_class": args.train_per_class,
        "test_per_class": args.test_per_class,
        "image_size": args.image_size,
        "seed": args.seed,
        "contrast": args.contrast,
        "noise": args.noise,
        "jitter": args.jitter,
    }
    print("resolved config:")
    print(dumps({**params, "format": args.format, "out": args.out}), end="")
    print(f"seed: {args.seed}")
    ds = synthetic_dataset(**params)
    out = Path(args.out)
    if args.format == "npz":
        save_npz(out, ds)
    else:
        if args.image_size != 32 or args.classes > 10:
            raise ConfigurationError("cifar10-binary output needs image_size 32 and at most 10 classes")
        write_cifar10_batch(out / "data_batch_1.bin", to_uint8(ds.x_train), ds.y_train.numpy())
        write_cifar10_batch(out / CIFAR_TEST_FILE, to_uint8(ds.x_test), ds.y_test.numpy())
    print(f"wrote {len(ds.x_train)} train / {len(ds.x_test)} test examples to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fsrkit", description="Feature Separation and Recalibration experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_parser(name, func, help_text, checkpoint=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config (JSON); defaults apply to missing keys")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--output-dir", help="output directory (else config, else $FSRKIT_OUTPUT_DIR, else ./runs)")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path (default: <output-dir>/checkpoint.ckpt)")
        p.set_defaults(func=func)
        return p

    p = experiment_parser("train", cmd_train, "adversarially train a model", checkpoint=False)
    p.add_argument("--epochs", type=int, help="override schedule.epochs")

    p = experiment_parser("evaluate", cmd_evaluate, "robust and ensemble accuracy of a checkpoint")
    p.add_argument("--report", help="report path (default: <output-dir>/report.json)")

    p = experiment_parser("probe-knn", cmd_probe, "weighted k-NN probe on FSR features")
    p.add_argument("--k", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--taps", nargs="+", choices=tuple(TAPS), default=list(TAPS))

    experiment_parser("ablate-routing", cmd_ablate, "re-evaluate a checkpoint under each FSR routing")

    p = experiment_parser("sweep", cmd_sweep, "train and evaluate over a config grid", checkpoint=False)
    p.add_argument("--grid", required=True, help='JSON object {"dotted.config.path": [values, ...]}')
    p.add_argument("--table", help="CSV output path (default: <output-dir>/sweep.csv)")

    experiment_parser("sanity-obfuscation", cmd_obfuscation, "gradient-obfuscation sanity checks")

    p = sub.add_parser("plot", help="plot a results CSV")
    p.add_argument("--table", required=True)
    p.add_argument("--x", help="x-axis column (default: first column)")
    p.add_argument("--metrics", nargs="+", help="metric columns (default: all numeric columns)")
    p.add_argument("--title")
    p.add_argument("--out", help="image path; .svg or .png (default: table path with .svg)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="npz file, or directory for cifar10-binary")
    p.add_argument("--format", choices=("npz", "cifar10-binary"), default="npz")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contrast", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--jitter", type=int, default=2)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, FormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, sort_keys=True, indent=2), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
