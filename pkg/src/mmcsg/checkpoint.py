"""MMCS1 checkpoint files.

Layout (all integers little-endian)::

    b"MMCS1"
    u32 config length, config as canonical JSON (UTF-8)
    u32 parameter count
    per parameter: u16 name length, UTF-8 name, u8 rank, u32 dims..., float64 payload

The config blob holds the model config plus whatever extra metadata the caller
passes (the CLI stores the vocabulary and the training target there).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig, param_shapes

MAGIC = b"MMCS1"


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode_checkpoint(config: ModelConfig, params: Mapping[str, np.ndarray],
                      extra: Mapping | None = None) -> bytes:
    shapes = param_shapes(config)
    if set(shapes) != set(params):
        raise CheckpointError("parameters do not match the config's registry")
    meta = {"model": config.to_dict(), **(extra or {})}
    blob = canonical_json(meta).encode("utf-8")
    out = [MAGIC, struct.pack("<I", len(blob)), blob, struct.pack("<I", len(shapes))]
    for name in shapes:
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    """Returns (config, params, metadata). Raises CheckpointError on any mismatch."""
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an MMCS1 checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (n_meta,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(n_meta).decode("utf-8"))
        config = ModelConfig.from_dict(meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad config header: {exc}") from exc
    shapes = param_shapes(config)
    (count,) = struct.unpack("<I", take(4))
    if count != len(shapes):
        raise CheckpointError(f"config expects {len(shapes)} parameters, file has {count}")
    params = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if name not in shapes:
            raise CheckpointError(f"unknown parameter {name!r}")
        if tuple(dims) != tuple(shapes[name]):
            raise CheckpointError(f"{name}: shape {tuple(dims)} does not match config "
                                  f"{tuple(shapes[name])}")
        size = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last parameter")
    meta.pop("model")
    return config, params, meta


def save_checkpoint(path: str | Path, config: ModelConfig, params: Mapping[str, np.ndarray],
                    extra: Mapping | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(config, params, extra))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
