"""Versioned binary checkpoint container.

Layout (little endian):
  magic "DTFS" | u32 version | u64 manifest_len | manifest JSON (utf-8)
  u32 tensor_count, then per tensor:
    u16 name_len | name utf-8 | u8 dtype_len | dtype str | u8 ndim |
    u64 dims[ndim] | raw row-major data
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

MAGIC = b"DTFS"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path: str, state: dict[str, np.ndarray], manifest: dict[str, Any]) -> None:
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name])
            name_b = name.encode("utf-8")
            dtype_b = arr.dtype.str.encode("ascii")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", len(dtype_b)))
            fh.write(dtype_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from None
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", blob, 8)
    pos = 16
    manifest = json.loads(blob[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (dlen,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dtype = np.dtype(blob[pos : pos + dlen].decode("ascii"))
        pos += dlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos) if ndim else ()
        pos += 8 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
        state[name] = arr
    return state, manifest
