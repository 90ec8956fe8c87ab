"""Versioned binary checkpoints.

Layout (little endian)::

    magic  b"SBRIDGE\\0"
    u32    format version
    u64    config length, then UTF-8 JSON config
    u64    step counter
    f64    best validation loss
    u32    parameter count, then records
    u32    optimizer record count, then records (``m:<name>`` / ``v:<name>``)
    u64    optimizer step

Each record is ``u16 name length, name, u8 ndim, u64 dims..., f64 data``.
Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SBRIDGE\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    step: int = 0
    best_valid: float = float("inf")


def _write_records(buf: io.BytesIO, records: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))


def _read_records(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", buf.read(2))
        name = buf.read(n).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = buf.read(8 * size)
        if len(data) != 8 * size:
            raise CheckpointError(f"truncated record {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(ckpt.config, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(blob)) + blob)
    buf.write(struct.pack("<Qd", ckpt.step, ckpt.best_valid))
    _write_records(buf, ckpt.params)
    _write_records(buf, ckpt.optimizer)
    buf.write(struct.pack("<Q", ckpt.optimizer_step))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = io.BytesIO(path.read_bytes())
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (n,) = struct.unpack("<Q", buf.read(8))
    config = json.loads(buf.read(n).decode())
    step, best = struct.unpack("<Qd", buf.read(16))
    params = _read_records(buf)
    opt = _read_records(buf)
    (opt_step,) = struct.unpack("<Q", buf.read(8))
    return Checkpoint(config, params, opt, opt_step, step, best)
