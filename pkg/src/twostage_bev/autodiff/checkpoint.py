"""Named-tensor checkpoint files.

Binary layout, repeated per tensor::

    u32 name_len | name bytes (utf-8) | u32 rank | u32 dims[rank] | f64 data (little-endian)

A JSON sidecar (``<path>.json``) lists names, shapes and byte offsets.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    index = []
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            offset = fh.tell()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
    Path(str(path) + ".json").write_text(json.dumps({"format": "named-f64-v1", "tensors": index}, indent=1))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    out = {}
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
        out[name] = data.copy()
    return out
