"""Datasets: CIFAR-10 binary batches and a seeded synthetic Gaussian-blob generator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError, FormatError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor
    num_classes: int
    name: str = "dataset"

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    def subset(self, n_train=None, n_test=None):
        """First ``n`` examples of each split (``None`` keeps the split whole)."""
        return Dataset(
            self.x_train[:n_train] if n_train is not None else self.x_train,
            self.y_train[:n_train] if n_train is not None else self.y_train,
            self.x_test[:n_test] if n_test is not None else self.x_test,
            self.y_test[:n_test] if n_test is not None else self.y_test,
            self.num_classes,
            self.name,
        )


def read_cifar10_batch(path):
    """Decode one CIFAR-10 binary batch into uint8 images [N, 3, 32, 32] and labels [N]."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record; "
            f"truncated record at byte offset {offset}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: label byte {labels[i]} out of range [0, 9] at byte offset {i * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def write_cifar10_batch(path, images, labels):
    """Encode uint8 images [N, 3, 32, 32] and labels into the CIFAR-10 binary layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.shape[1:] != (3, 32, 32) or len(images) != len(labels):
        raise ConfigurationError(f"CIFAR-10 records need [N, 3, 32, 32] images, got {images.shape}")
    records = np.concatenate([labels.reshape(-1, 1), images.reshape(len(images), -1)], axis=1)
    _atomic_write_bytes(path, records.tobytes())


def _atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _to_tensor(images, labels):
    x = torch.from_numpy(images.astype(np.float32) / np.float32(255.0))
    y = torch.from_numpy(labels.astype(np.int64))
    return x, y


def ingest_cifar10(path, subset_train: Optional[int] = None, subset_test: Optional[int] = None) -> Dataset:
    """Load every ``data_batch_*.bin`` present plus ``test_batch.bin`` from ``path``; pixels scaled to [0, 1]."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {root}")
    train_files = [root / f for f in CIFAR_TRAIN_FILES if (root / f).exists()]
    if not train_files:
        raise FileNotFoundError(f"no data_batch_*.bin files under {root}")
    test_file = root / CIFAR_TEST_FILE
    if not test_file.exists():
        raise FileNotFoundError(f"missing {test_file}")
    parts = [read_cifar10_batch(f) for f in train_files]
    x_train, y_train = _to_tensor(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    x_test, y_test = _to_tensor(*read_cifar10_batch(test_file))
    return Dataset(x_train, y_train, x_test, y_test, 10, "cifar10").subset(subset_train, subset_test)


def _class_templates(num_classes, image_size, rng):
    """One smooth colored blob per class at a class-specific position."""
    coords = np.arange(image_size, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    side = int(np.ceil(np.sqrt(num_classes)))
    cell = image_size / side
    radius = cell / 2.5
    colors = _spread_colors(num_classes, rng)
    templates = np.empty((num_classes, 3, image_size, image_size))
    for c in range(num_classes):
        cy = (c // side + 0.5) * cell
        cx = (c % side + 0.5) * cell
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        templates[c] = colors[c][:, None, None] * blob[None]
    return templates


def _spread_colors(n, rng, candidates=512):
    """Greedy max-min selection of ``n`` colors from the cube [-1, 1]^3.

    Small networks see little of a blob's position, so classes must also
    differ clearly in color.
    """
    pool = rng.uniform(-1.0, 1.0, size=(candidates, 3))
    pool /= np.abs(pool).max(axis=1, keepdims=True)
    chosen = [0]
    dist = np.linalg.norm(pool - pool[0], axis=1)
    while len(chosen) < n:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pool - pool[nxt], axis=1))
    return pool[chosen]


def synthetic_dataset(
    num_classes=10,
    train_per_class=200,
    test_per_class=50,
    image_size=32,
    seed=0,
    contrast=0.3,
    noise=0.1,
    jitter=2,
) -> Dataset:
    """Class-conditional Gaussian-blob images, deterministic under ``seed``.

    Each class owns a colored blob at its own grid cell. A sample is
    ``0.5 + contrast * template`` shifted by up to ``jitter`` pixels, plus
    i.i.d. Gaussian pixel noise of std ``noise``, clipped to [0, 1].
    Examples are interleaved by class, so any prefix is roughly balanced.
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    if train_per_class < 1 or test_per_class < 1 or image_size < 4:
        raise ConfigurationError("per-class counts must be >= 1 and image_size >= 4")
    if contrast <= 0 or noise < 0 or jitter < 0:
        raise ConfigurationError("contrast must be > 0, noise and jitter >= 0")
    rng = np.random.default_rng(seed)
    templates = _class_templates(num_classes, image_size, rng)

    def draw(per_class):
        labels = np.tile(np.arange(num_classes), per_class)
        n = len(labels)
        shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
        images = np.empty((n, 3, image_size, image_size))
        for i, (c, (dy, dx)) in enumerate(zip(labels, shifts)):
            images[i] = np.roll(templates[c], shift=(int(dy), int(dx)), axis=(1, 2))
        images = 0.5 + contrast * images + noise * rng.standard_normal(images.shape)
        return torch.from_numpy(np.clip(images, 0.0, 1.0).astype(np.float32)), torch.from_numpy(labels.astype(np.int64))

    x_train, y_train = draw(train_per_class)
    x_test, y_test = draw(test_per_class)
    return Dataset(x_train, y_train, x_test, y_test, num_classes, "synthetic")


def save_npz(path, ds: Dataset):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}.npz")
    np.savez(
        tmp,
        x_train=ds.x_train.numpy(),
        y_train=ds.y_train.numpy(),
        x_test=ds.x_test.numpy(),
        y_test=ds.y_test.numpy(),
        num_classes=np.int64(ds.num_classes),
    )
    os.replace(tmp, path)


def load_npz(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with np.load(path) as z:
        return Dataset(
            torch.from_numpy(z["x_train"]),
            torch.from_numpy(z["y_train"]),
            torch.from_numpy(z["x_test"]),
            torch.from_numpy(z["y_test"]),
            int(z["num_classes"]),
            path.stem,
        )


def to_uint8(x):
    return np.clip(np.rint(x.numpy() * 255.0), 0, 255).astype(np.uint8)
