"""Versioned binary parameter checkpoints.

Layout (all integers little-endian u32):

    magic "IFK1"
    repeated until EOF:
        name_len, name bytes (utf-8), rank, dims[rank], payload

The payload is the row-major float64 buffer. Records are written in sorted
name order, so saving the same parameters twice produces identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"IFK1"


def save_checkpoint(params: dict, path) -> None:
    """Write a name -> array/Tensor mapping to ``path``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(params):
            value = params[name]
            arr = np.ascontiguousarray(
                value.data if isinstance(value, Tensor) else value, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as a name -> float64 array mapping."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError("%s is not a checkpoint file (bad magic %r)" % (path, blob[:4]))
    out: dict[str, np.ndarray] = {}
    pos = 4
    total = len(blob)
    while pos < total:
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from("<%dI" % rank, blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64).copy()
    if pos != total:
        raise ValueError("trailing bytes in checkpoint %s" % path)
    return out
