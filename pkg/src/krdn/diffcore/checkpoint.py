"""Named-tensor container.

Binary layout (little endian)::

    magic  b"KRDNTNS1"
    u32    tensor count
    per tensor:
        u16 name length, name (utf-8)
        u8  dtype length, dtype string (numpy ``dtype.str``, e.g. "<f8")
        u8  ndim, ndim x u64 shape
        u64 payload byte count, row-major payload

Metadata (epoch, config hash, RNG state, ...) lives in a JSON sidecar next
to the binary file, ``<path>.json``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"KRDNTNS1"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw_name = name.encode("utf-8")
        dtype = arr.dtype.str.encode("ascii")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", len(dtype)) + dtype)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes(order="C")
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    path.write_bytes(b"".join(chunks))
    if metadata is not None:
        Path(str(path) + ".json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<H")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (n,) = take("<B")
        dtype = np.dtype(buf[pos:pos + n].decode("ascii"))
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q") if ndim else ()
        (nbytes,) = take("<Q")
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
        out[name] = arr.reshape(shape).copy()
        pos += nbytes
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
    return out, meta
