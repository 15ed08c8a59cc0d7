"""Named-tensor binary checkpoints.

Layout: magic "STPV", version byte 1, then one record per tensor:
  name length (u16 LE) + UTF-8 name
  dtype byte (0 = float32, 1 = float64)
  rank (u8)
  extents (u32 LE each)
  payload (little-endian values, row-major)
Round trips are bit-exact; malformed files are rejected with byte offsets.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"STPV"
VERSION = 1
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint data."""


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype not in _DTYPE_CODE:
        raise CheckpointError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    # ascontiguousarray would promote rank 0 to rank 1
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def save_checkpoint(path, tensors: Mapping[str, "np.ndarray | Tensor"]) -> None:
    """Write named tensors in insertion order. Names must be unique (dict keys are)."""
    chunks = [MAGIC, bytes([VERSION])]
    for name, value in tensors.items():
        arr = _as_array(value)
        encoded = name.encode("utf-8")
        if not 0 < len(encoded) < 2 ** 16:
            raise CheckpointError(f"tensor name {name!r} must encode to 1..65535 bytes")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} rank {arr.ndim} exceeds 255")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(bytes([_DTYPE_CODE[arr.dtype], arr.ndim]))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 5:
        raise CheckpointError(f"file too short ({len(raw)} bytes) for header")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r} at byte 0, expected {MAGIC!r}")
    if raw[4] != VERSION:
        raise CheckpointError(f"unsupported version {raw[4]} at byte 4")

    tensors: dict[str, np.ndarray] = {}
    pos = 5
    n = len(raw)

    def need(count: int, what: str) -> int:
        if pos + count > n:
            raise CheckpointError(
                f"truncated {what} at byte {pos}: expected {count} bytes, got {n - pos}")
        return pos + count

    while pos < n:
        end = need(2, "name length")
        (name_len,) = struct.unpack("<H", raw[pos:end])
        pos = end
        end = need(name_len, "name")
        name = raw[pos:end].decode("utf-8")
        pos = end
        end = need(2, "dtype/rank")
        dtype_code, rank = raw[pos], raw[pos + 1]
        if dtype_code not in _CODE_DTYPE:
            raise CheckpointError(f"unknown dtype code {dtype_code} at byte {pos}")
        pos = end
        end = need(4 * rank, "extents")
        shape = struct.unpack(f"<{rank}I", raw[pos:end]) if rank else ()
        pos = end
        dtype = _CODE_DTYPE[dtype_code]
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        end = need(count * dtype.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(raw[pos:end], dtype=dtype).reshape(shape)
        pos = end
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors


def load_into(path, params: Mapping[str, Tensor], prefix: str = "") -> None:
    """Copy checkpoint values into existing parameter tensors, checking shapes."""
    stored = load_checkpoint(path)
    for name, tensor in params.items():
        key = prefix + name
        if key not in stored:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = stored[key]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor {key!r} has shape {arr.shape}, model expects {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
