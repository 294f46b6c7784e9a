"""Static line plots from flat CSV results tables."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

META_COLUMNS = ("config_hash", "seed", "format_version")


def read_table(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"results table not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def _as_float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def numeric_columns(columns, rows):
    return [c for c in columns if rows and all(_as_float(r[c]) is not None for r in rows)]


def plot_table(columns, rows, x=None, metrics=None, title=None):
    """One curve per metric column against ``x`` (default: first column).

    Non-numeric ``x`` values are placed at integer positions and used as tick labels.
    """
    if not rows:
        raise ValueError("cannot plot an empty table")
    x = x or columns[0]
    if x not in columns:
        raise ValueError(f"x column {x!r} not in table columns {columns}")
    if metrics is None:
        metrics = [c for c in numeric_columns(columns, rows) if c != x and c not in META_COLUMNS]
    missing = [m for m in metrics if m not in columns]
    if missing:
        raise ValueError(f"metric columns not in table: {missing}")
    xs = [_as_float(r[x]) for r in rows]
    categorical = any(v is None for v in xs)
    if categorical:
        xs = list(range(len(rows)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for m in metrics:
        ax.plot(xs, [float(r[m]) for r in rows], marker="o", label=m)
    if categorical:
        ax.set_xticks(xs)
        ax.set_xticklabels([r[x] for r in rows], rotation=20)
    ax.set_xlabel(x)
    ax.set_ylabel(metrics[0] if len(metrics) == 1 else "value")
    if title:
        ax.set_title(title)
    if len(metrics) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig


def save_figure(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp.{os.getpid()}.{path.name}")
    metadata = {"Date": None} if path.suffix.lower() == ".svg" else None
    with matplotlib.rc_context({"svg.hashsalt": "fsrkit"}):
        fig.savefig(tmp, metadata=metadata)
    plt.close(fig)
    os.replace(tmp, path)
