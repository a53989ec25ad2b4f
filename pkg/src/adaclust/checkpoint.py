"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ACLF"
    u32 config_len, config_len bytes of UTF-8 JSON
    u32 format_version
    u32 entry_count
    entry_count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
                    prod(dims) x f64 }

The JSON blob holds ``{"model": ModelConfig, "train_state": {...}}``.
Optimizer moments are stored as extra entries under ``optim.m.`` and
``optim.v.`` prefixes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import CaptionerModel, ModelConfig
from .optim import Adam

MAGIC = b"ACLF"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_entry(buf: list, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.append(struct.pack("<H", len(raw)))
    buf.append(raw)
    buf.append(struct.pack("<B", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(
    path,
    model: CaptionerModel,
    optimizer: Optional[Adam] = None,
    train_state: Optional[dict] = None,
) -> None:
    entries = [(name, p.data) for name, p in model.parameters().items()]
    state = dict(train_state or {})
    if optimizer is not None:
        state["optimizer"] = {"lr": optimizer.lr, "step_count": optimizer.step_count}
        for name in sorted(optimizer.m):
            entries.append((f"optim.m.{name}", optimizer.m[name]))
            entries.append((f"optim.v.{name}", optimizer.v[name]))
    blob = json.dumps({"model": model.config.to_dict(), "train_state": state}, sort_keys=True).encode()
    buf = [MAGIC, struct.pack("<I", len(blob)), blob, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries:
        _write_entry(buf, name, arr)
    Path(path).write_bytes(b"".join(buf))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return the decoded JSON header and every named array."""
    data = Path(path).read_bytes()
    try:
        return _parse(path, data)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse(path, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def unpack(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (blob_len,) = unpack("<I")
    header = json.loads(data[pos: pos + blob_len].decode("utf-8"))
    pos += blob_len
    version, count = unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = unpack("<H")
        name = data[pos: pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = unpack("<B")
        dims = unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        if pos + 8 * size > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        arrays[name] = arr.astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, arrays


def load_checkpoint(path) -> tuple[CaptionerModel, Optional[Adam], dict]:
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model"])
    model = CaptionerModel.init(config)
    params = model.parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name].copy()
    state = header.get("train_state", {})
    optimizer = None
    if "optimizer" in state:
        opt = state["optimizer"]
        optimizer = Adam(lr=opt["lr"], step_count=opt["step_count"])
        for name in params:
            if f"optim.m.{name}" in arrays:
                optimizer.m[name] = arrays[f"optim.m.{name}"].copy()
                optimizer.v[name] = arrays[f"optim.v.{name}"].copy()
    return model, optimizer, state
