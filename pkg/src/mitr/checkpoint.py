"""Versioned binary checkpoint container.

Layout, all little-endian:

    magic    6 bytes  b"MITRCK"
    version  u16      currently 1
    cfg_len  u32      length of the config record
    cfg      utf-8 JSON with sorted keys (ModelConfig fields)
    count    u32      number of tensors
    per tensor: name_len u16, name utf-8, ndim u8, dims u32 each,
                float64 raw values, row-major

Saving what load_checkpoint returned reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .config import ModelConfig

CHECKPOINT_MAGIC = b"MITRCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray]):
    cfg_blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(offset, size):
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        return blob[offset:offset + size], offset + size

    head, pos = take(0, len(CHECKPOINT_MAGIC))
    if head != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {head!r}")
    raw, pos = take(pos, struct.calcsize("<HI"))
    version, cfg_len = struct.unpack("<HI", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    raw, pos = take(pos, cfg_len)
    config = ModelConfig.from_dict(json.loads(raw.decode("utf-8")))
    raw, pos = take(pos, 4)
    (count,) = struct.unpack("<I", raw)
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, pos = take(pos, 2)
        (name_len,) = struct.unpack("<H", raw)
        raw, pos = take(pos, name_len)
        name = raw.decode("utf-8")
        raw, pos = take(pos, 1)
        (ndim,) = struct.unpack("<B", raw)
        raw, pos = take(pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        n_values = int(np.prod(shape)) if ndim else 1
        raw, pos = take(pos, 8 * n_values)
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return config, params


def params_checksum(params: dict[str, np.ndarray]) -> str:
    """Order-sensitive digest of parameter names, shapes, and values."""
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
