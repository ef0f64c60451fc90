"""Versioned little-endian checkpoint files.

Layout::

    magic        8 bytes   b"INFLABCK"
    version      u32
    config_len   u32, then config_len bytes of UTF-8 JSON
    n_tensors    u32
    n_tensors x  { name_len u16, name bytes, ndim u8, dims u32 * ndim,
                   dtype u8 (0 = float32, 1 = float64), offset u64, nbytes u64 }
    payload      raw little-endian tensor data; offsets are relative to its start

Optimizer moments are stored as extra tensors named ``opt.m.<param>`` and
``opt.v.<param>``; training counters live in the JSON header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Weights
from .tensor import Tensor

MAGIC = b"INFLABCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: Weights
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def save_checkpoint(path, config: ModelConfig, weights: Weights, moments=None, meta=None) -> None:
    arrays: dict[str, np.ndarray] = {name: t.data for name, t in weights.items()}
    for name, arr in (moments or {}).items():
        arrays[name] = arr
    header = json.dumps({"model": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()

    table = []
    offset = 0
    for name, arr in arrays.items():
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nbytes = arr.size * arr.dtype.itemsize
        table.append((name, arr, code, offset, nbytes))
        offset += nbytes

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(table)))
        for name, arr, code, off, nbytes in table:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<BQQ", code, off, nbytes))
        for _, arr, code, _, _ in table:
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp.replace(path)


@dataclass
class TensorEntry:
    name: str
    shape: tuple
    dtype: np.dtype
    offset: int
    nbytes: int


def _parse_header(fh, path) -> tuple[dict, list[TensorEntry], int]:
    """Header JSON, tensor table and the absolute payload offset."""
    if fh.read(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(fh.read(hlen).decode())
    (count,) = struct.unpack("<I", fh.read(4))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode()
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        code, off, nbytes = struct.unpack("<BQQ", fh.read(17))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        entries.append(TensorEntry(name, tuple(shape), _DTYPES[code], off, nbytes))
    return header, entries, fh.tell()


def read_header(path) -> tuple[ModelConfig, dict, list[TensorEntry]]:
    """Config, metadata and tensor table without touching the payload."""
    with open(path, "rb") as fh:
        header, entries, _ = _parse_header(fh, path)
    return ModelConfig.from_dict(header["model"]), header.get("meta", {}), entries


def load_checkpoint(path) -> Checkpoint:
    weights: Weights = {}
    moments: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        header, entries, base = _parse_header(fh, path)
        for e in entries:
            fh.seek(base + e.offset)
            raw = fh.read(e.nbytes)
            if len(raw) != e.nbytes:
                raise CheckpointError(f"{path}: truncated payload for {e.name}")
            arr = np.frombuffer(raw, dtype=e.dtype).reshape(e.shape).astype(e.dtype.newbyteorder("="))
            if e.name.startswith("opt."):
                moments[e.name] = arr
            else:
                weights[e.name] = Tensor(arr, requires_grad=True)
    return Checkpoint(ModelConfig.from_dict(header["model"]), weights, moments, header.get("meta", {}))


def describe(path) -> dict:
    """Summary of a checkpoint file: config, parameter count and per-tensor shapes."""
    config, meta, entries = read_header(path)
    params = [e for e in entries if not e.name.startswith("opt.")]
    return {
        "config": config.to_dict(),
        "parameters": int(sum(int(np.prod(e.shape)) for e in params)),
        "tensors": {e.name: list(e.shape) for e in params},
        "has_optimizer_state": len(params) != len(entries),
        "meta": meta,
    }
