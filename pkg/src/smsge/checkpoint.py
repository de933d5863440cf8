"""Versioned binary tensor container used for checkpoints, probes and features.

Layout (all integers little-endian)::

    b"SMSGE1"            magic
    u32                  format version
    u64 + bytes          UTF-8 JSON metadata (sorted keys)
    u32                  tensor count
    per tensor:
      u32 + bytes        UTF-8 name
      u32                ndim
      u64 * ndim         shape
      f64 * prod(shape)  row-major payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig

MAGIC = b"SMSGE1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes(order="C")]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated file while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not an SMSGE container (bad magic bytes)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<Q", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        (ndim,) = r.unpack("<I", f"{name} ndim")
        shape = r.unpack(f"<{ndim}Q", f"{name} shape")
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = r.take(8 * size, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after last tensor")
    return meta, tensors


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    skeleton: dict
    epoch: int = 0
    rng_state: dict | None = None
    loss_history: list[float] = field(default_factory=list)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0

    KIND = "checkpoint"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "kind": Checkpoint.KIND,
        "config": ckpt.config.to_dict(),
        "skeleton": ckpt.skeleton,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "loss_history": list(ckpt.loss_history),
        "optimizer_step": ckpt.optimizer_step,
        "param_names": list(ckpt.params),
    }
    tensors = dict(ckpt.params)
    tensors.update({f"adam.{k}": v for k, v in ckpt.optimizer.items()})
    write_container(path, meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = read_container(path)
    if meta.get("kind") != Checkpoint.KIND:
        raise CheckpointError(f"{path}: expected a checkpoint, found {meta.get('kind')!r}")
    names = meta["param_names"]
    missing = [n for n in names if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    return Checkpoint(
        params={n: tensors[n] for n in names},
        config=TrainConfig.from_dict(meta["config"]),
        skeleton=meta["skeleton"],
        epoch=meta["epoch"],
        rng_state=meta["rng_state"],
        loss_history=meta["loss_history"],
        optimizer={k[len("adam."):]: v for k, v in tensors.items() if k.startswith("adam.")},
        optimizer_step=meta["optimizer_step"],
    )
