"""Experiment configuration: a JSON tree with a default for every field."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from .attacks import AttackSpec, default_eval_specs
from .errors import ConfigurationError
from .fsr import FsrConfig
from .models import BackboneSpec
from .training import DefenseSpec, Schedule

FORMAT_VERSION = 1
OUTPUT_DIR_ENV = "FSRKIT_OUTPUT_DIR"
DATA_KINDS = ("synthetic", "cifar10", "npz")


@dataclass
class DataSpec:
    kind: str = "synthetic"
    path: Optional[str] = None
    subset_train: Optional[int] = None
    subset_test: Optional[int] = None
    # synthetic generator parameters
    num_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 50
    image_size: int = 32
    seed: int = 0
    contrast: float = 0.3
    noise: float = 0.1
    jitter: int = 2

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigurationError(f"unknown data kind {self.kind!r}; expected one of {DATA_KINDS}")
        if self.kind != "synthetic" and not self.path:
            raise ConfigurationError(f"data kind {self.kind!r} needs a path")


@dataclass
class ProbeSpec:
    k: int = 5
    gamma: float = 0.07
    # name of an eval attack used to craft the query set
    attack: str = "pgd-20"

    def __post_init__(self):
        if self.k < 1 or not self.gamma > 0:
            raise ConfigurationError("probe k must be >= 1 and gamma > 0")


@dataclass
class ExperimentConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    fsr: FsrConfig = field(default_factory=FsrConfig)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    eval_attacks: List[AttackSpec] = field(default_factory=default_eval_specs)
    data: DataSpec = field(default_factory=DataSpec)
    schedule: Schedule = field(default_factory=Schedule)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    seed: int = 0
    eval_examples: Optional[int] = 500
    checkpoint_every: int = 0
    output_dir: Optional[str] = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        _reject_unknown(cls, d, "config")
        kwargs = {}
        simple = {"backbone": BackboneSpec, "fsr": FsrConfig, "data": DataSpec, "schedule": Schedule, "probe": ProbeSpec}
        for key, sub in simple.items():
            if key in d:
                kwargs[key] = _build(sub, d.pop(key), key)
        if "defense" in d:
            kwargs["defense"] = _defense_from_dict(d.pop("defense"))
        if "eval_attacks" in d:
            attacks = d.pop("eval_attacks")
            if not isinstance(attacks, list):
                raise ConfigurationError("eval_attacks must be a list")
            kwargs["eval_attacks"] = [_build(AttackSpec, a, "eval_attacks[]") for a in attacks]
        kwargs.update(d)
        return cls(**kwargs)

    def __post_init__(self):
        if self.eval_examples is not None and self.eval_examples < 1:
            raise ConfigurationError("eval_examples must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")
        names = [a.name for a in self.eval_attacks]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"eval attack names must be unique, got {names}")

    def hash(self):
        """sha256 over the canonical JSON of everything except ``output_dir``."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(dumps(d).encode()).hexdigest()[:16]

    def resolved_output_dir(self, override=None):
        return Path(override or self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "runs")


def _reject_unknown(cls, d, where):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {unknown}")


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be an object")
    _reject_unknown(cls, d, where)
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def _defense_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigurationError("defense must be an object")
    d = dict(d)
    _reject_unknown(DefenseSpec, d, "defense")
    if "train_attack" in d:
        d["train_attack"] = _build(AttackSpec, d["train_attack"], "defense.train_attack")
    return DefenseSpec(**d)


def dumps(obj):
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def parse(text):
    data = json.loads(text) if text.strip() else {}
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a JSON object")
    return ExperimentConfig.from_dict(data)


def serialize(cfg: ExperimentConfig):
    return dumps(cfg.to_dict())


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse(path.read_text())


def save_config(cfg: ExperimentConfig, path):
    atomic_write_text(path, serialize(cfg))


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def set_by_path(d, dotted, value):
    """Set ``d["a"]["b"] = value`` for ``dotted == "a.b"`` on a nested dict."""
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if k not in cur or not isinstance(cur[k], dict):
            raise ConfigurationError(f"unknown config path {dotted!r}")
        cur = cur[k]
    if keys[-1] not in cur:
        raise ConfigurationError(f"unknown config path {dotted!r}")
    cur[keys[-1]] = value


def with_overrides(cfg: ExperimentConfig, overrides):
    d = cfg.to_dict()
    for k, v in overrides.items():
        set_by_path(d, k, v)
    return ExperimentConfig.from_dict(d)
