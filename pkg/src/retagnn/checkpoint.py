"""Versioned binary container for a ParamSet.

Layout (little-endian)::

    b"RTGN" | u32 version | u32 header_len | header (UTF-8 key=value lines)
    u32 tensor_count
    per tensor: u32 name_len | name | u32 rank | u32 extents[rank] | f32 values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, parse_kv_text
from .recommender import ParamSet

MAGIC = b"RTGN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamSet, header: dict) -> None:
    header_bytes = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    named = params.named()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.value.ndim))
            fh.write(struct.pack(f"<{t.value.ndim}I", *t.value.shape))
            fh.write(np.ascontiguousarray(t.value, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, header_len = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = parse_kv_text(data[pos:pos + header_len].decode("utf-8"))
    pos += header_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        end = pos + 4 * size
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(shape).astype(np.float64)
        pos = end
    return header, tensors


def load_params(path, config: ModelConfig) -> tuple[ParamSet, dict[str, str]]:
    """Load into a fresh ParamSet built from ``config``; shapes must match."""
    header, tensors = read_checkpoint(path)
    params = ParamSet.init(config, 0)
    expected = params.shapes()
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name}: shape {tensors[name].shape}, config wants {shape}")
    extra = set(tensors) - set(expected)
    if extra:
        raise CheckpointError(f"unexpected tensors: {sorted(extra)}")
    params.load_values(tensors)
    return params, header
