"""Writer/reader for the engine's CCDT tensor container.

Implemented against the published format description (little-endian: magic
"CCDT", u16 version 1, u8 dtype tag 0 = float32, u8 rank, u32 dims slowest
first, row-major payload) rather than by importing the engine, so this
package stands alone.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CCDT"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHBB")


def write(path: str | Path, tensor: np.ndarray) -> None:
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
        raise ValueError(f"tensor must have rank >= 1 with positive dims, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, version, dtype, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC or version != VERSION or dtype != DTYPE_F32 or rank == 0:
        raise ValueError(f"{path}: not a CCDT v1 float32 tensor")
    dims = struct.unpack_from(f"<{rank}I", data, _HEADER.size)
    offset = _HEADER.size + 4 * rank
    count = int(np.prod(dims))
    if len(data) - offset < 4 * count:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(dims).copy()
