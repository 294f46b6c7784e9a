"""Binary checkpoint format.

Layout, all integers little-endian::

    8 bytes   magic b"FSRKCKPT"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header (sorted keys, compact separators)
    u32       tensor count T
    T times:  u32 name length, UTF-8 name, u32 ndim, ndim x u32 dims,
              prod(dims) x float32 payload in row-major order

Tensor names are ``model/<state_dict key>`` and
``optim/<parameter name>/momentum_buffer``, written in sorted order. The
header records the backbone spec, FSR config, epoch, torch RNG state
(base64), optimizer hyperparameters and the config hash.
"""

from __future__ import annotations

import base64
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np
import torch

from .errors import ConfigurationError, FormatError

MAGIC = b"FSRKCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def epoch(self):
        return self.header.get("epoch", 0)


def encode(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<IQ", ckpt.version, len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes(order="C"))
    return out.getvalue()


def decode(payload: bytes) -> Checkpoint:
    view = memoryview(payload)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"checkpoint truncated while reading {what} at byte offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8, "magic")) != MAGIC:
        raise FormatError("not an fsrkit checkpoint (bad magic)")
    version, header_len = struct.unpack("<IQ", take(12, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    header = json.loads(bytes(take(header_len, "header")).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, f"ndim of {name}"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {name}"))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(bytes(take(4 * n, f"payload of {name}")), dtype="<f4").reshape(shape)
        tensors[name] = data
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    return Checkpoint(header=header, tensors=tensors, version=version)


def capture(model, optimizer=None, epoch=0, config_hash=None, extra=None) -> Checkpoint:
    """Snapshot model parameters/buffers, SGD momentum buffers and the torch RNG state."""
    tensors = {f"model/{k}": v.detach().cpu().float().numpy().copy() for k, v in model.state_dict().items()}
    opt_header = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        group = optimizer.param_groups[0]
        opt_header = {k: group[k] for k in ("lr", "momentum", "weight_decay")}
        for p, state in optimizer.state.items():
            buf = state.get("momentum_buffer")
            if buf is not None:
                tensors[f"optim/{names[id(p)]}/momentum_buffer"] = buf.detach().cpu().float().numpy().copy()
    header = {
        "backbone": _jsonable(asdict(model.spec)),
        "fsr": _jsonable(asdict(model.fsr_cfg)),
        "epoch": int(epoch),
        "rng_state": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
        "optimizer": opt_header,
        "config_hash": config_hash,
    }
    if extra:
        header.update(extra)
    return Checkpoint(header=header, tensors=tensors)


def _jsonable(d):
    return json.loads(json.dumps(d))


def check_compatible(ckpt: Checkpoint, model):
    expected = _jsonable(asdict(model.spec))
    if ckpt.header.get("backbone") != expected:
        raise ConfigurationError(
            f"checkpoint backbone {ckpt.header.get('backbone')} does not match the model's backbone {expected}"
        )


def restore(ckpt: Checkpoint, model, optimizer=None, restore_rng=False):
    """Load a checkpoint into ``model`` (and optionally the optimizer and torch RNG)."""
    check_compatible(ckpt, model)
    state = model.state_dict()
    new_state = {}
    for k, ref in state.items():
        key = f"model/{k}"
        if key not in ckpt.tensors:
            raise FormatError(f"checkpoint lacks tensor {key}")
        arr = ckpt.tensors[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"shape mismatch for {key}: checkpoint {arr.shape}, model {tuple(ref.shape)}")
        new_state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    model.load_state_dict(new_state)
    if optimizer is not None:
        for name, p in model.named_parameters():
            key = f"optim/{name}/momentum_buffer"
            if key in ckpt.tensors:
                optimizer.state[p]["momentum_buffer"] = torch.from_numpy(np.array(ckpt.tensors[key]))
    if restore_rng:
        raw = base64.b64decode(ckpt.header["rng_state"])
        torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    return model


def save(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
