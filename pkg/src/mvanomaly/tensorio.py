"""Binary tensor file format (FT32).

Layout: magic ``FT32`` (4 bytes), u32 little-endian ndim, ndim u64
little-endian extents, then the row-major float32 little-endian payload.
Round-trips are bit-exact for every finite float32 payload.  Values are
checked for finiteness on both read and write.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, NonFiniteError, ShapeMismatchError

MAGIC = b"FT32"
_MAX_NDIM = 16


def write_tensor(path, array) -> None:
    """Write ``array`` to ``path`` in the FT32 format.

    The array is converted to C-contiguous float32.  Raises NonFiniteError
    if any value is NaN or Inf after conversion.
    """
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"refusing to write non-finite tensor to {path}")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read an FT32 file and return a float32 array.

    Raises BadMagicError, ShapeMismatchError, or NonFiniteError on the
    corresponding defect; each is distinct so callers can tell them apart.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an FT32 file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if ndim > _MAX_NDIM:
        raise ShapeMismatchError(f"{path}: implausible ndim {ndim}")
    header_end = 8 + 8 * ndim
    if len(raw) < header_end:
        raise ShapeMismatchError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8) if ndim else ()
    count = 1
    for extent in shape:
        count *= extent
    payload = raw[header_end:]
    if len(payload) != 4 * count:
        raise ShapeMismatchError(
            f"{path}: header declares {count} floats, payload holds "
            f"{len(payload) // 4}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    return arr
