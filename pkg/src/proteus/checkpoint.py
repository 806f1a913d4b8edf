"""PRTC checkpoint files.

Layout (little-endian): magic ``PRTC``, u32 version, u32 tensor count, then
per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims, float32 data.
The run configuration travels as a JSON string stored byte-per-element in a
1-D tensor named ``__config__``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import FormatError

MAGIC = b"PRTC"
VERSION = 1
CONFIG_KEY = "__config__"


class CheckpointError(FormatError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(getattr(value, "data", value))


def encode_checkpoint(tensors: Mapping[str, object], config: Optional[dict] = None) -> bytes:
    entries = dict(tensors)
    if config is not None:
        raw = json.dumps(config, sort_keys=True).encode("utf-8")
        entries[CONFIG_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = _as_array(value)
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"cannot encode tensor {name!r}")
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(buf: bytes) -> Tuple[Dict[str, np.ndarray], Optional[dict]]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, "
                                  f"{len(view) - pos} available")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic; not a PRTC checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(n, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not UTF-8 at offset {pos}") from exc
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * size, f"{name} data"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    config = None
    if CONFIG_KEY in tensors:
        raw = tensors.pop(CONFIG_KEY).astype(np.uint8).tobytes()
        try:
            config = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError("embedded config is not valid JSON") from exc
    return tensors, config


def save_checkpoint(path, tensors: Mapping[str, object], config: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, config))


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Optional[dict]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)
