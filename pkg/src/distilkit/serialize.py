"""Versioned binary container used by all model/dataset/sample files.

Layout: 8-byte magic, u32 format version, u32 header length, JSON header,
then the raw array payload. Arrays are stored little-endian, C-order, so a
save/load round trip is bit-exact. The JSON header carries the record kind,
a free-form metadata dict and the array manifest (name, dtype, shape).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSTLBIN\x00"
FORMAT_VERSION = 1


class FileFormatError(Exception):
    """Raised when a container file is malformed or of the wrong kind."""


def save_arrays(path, kind: str, meta: dict, arrays: dict) -> None:
    """Write named float/int arrays plus metadata as one container file."""
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        )
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": manifest}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path, expect_kind: str | None = None):
    """Read a container file, returning (kind, meta, arrays)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported format version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise FileFormatError(
                    f"{path}: truncated payload for array {entry['name']!r}"
                )
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise FileFormatError(f"{path}: expected kind {expect_kind!r}, found {kind!r}")
    return kind, header["meta"], arrays
