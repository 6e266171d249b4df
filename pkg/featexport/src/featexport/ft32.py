"""Reader and writer for the FT32 tensor interchange format.

One file holds one little-endian float32 tensor: 4-byte magic ``FT32``,
u32 rank, one u64 extent per axis, then the row-major payload. The
format is shared with the scoring engine, which is exactly why this
module re-implements it instead of importing anything: the two packages
must agree on bytes, not on a library.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FT32"
_MAX_NDIM = 16


def write_ft32(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: refusing to write NaN or Inf")
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_ft32(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: missing FT32 magic")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    if ndim > _MAX_NDIM:
        raise FormatError(f"{path}: implausible rank {ndim}")
    offset = 8 + 8 * ndim
    if len(blob) < offset:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 8) if ndim else ()
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(blob) - offset != 4 * count:
        raise FormatError(
            f"{path}: payload holds {(len(blob) - offset) // 4} floats, "
            f"header declares {count}"
        )
    arr = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: payload contains NaN or Inf")
    return arr.astype(np.float32)
