"""Versioned binary container shared by keys, ciphertexts and models.

Layout (all integers little-endian)::

    b"BEAA"                  magic, 4 bytes
    u16 version              currently 1
    u16 kind_len, kind       utf-8 tag, e.g. "ciphertexts", "model"
    u32 header_len, header   utf-8 JSON: {"meta": {...}, "arrays": [...]}
    payload                  raw array bytes, concatenated

Each entry of ``header["arrays"]`` is ``{"name", "dtype", "shape", "offset"}``
with ``offset`` counted from the start of the payload and ``dtype`` a numpy
little-endian type string such as ``"<i8"`` or ``"<f4"``.
"""
from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

MAGIC = b"BEAA"
VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(kind: str, meta: dict, arrays: dict | None = None) -> bytes:
    arrays = arrays or {}
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    kind_b = kind.encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HH", VERSION, len(kind_b)))
    out.write(kind_b)
    out.write(struct.pack("<I", len(header)))
    out.write(header)
    for raw in blobs:
        out.write(raw)
    return out.getvalue()


def loads(buf: bytes, expect_kind: str | None = None):
    """Return ``(kind, meta, arrays)``."""
    if buf[:4] != MAGIC:
        raise ContainerError("not a BEAA container (bad magic)")
    version, kind_len = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 8
    kind = buf[pos:pos + kind_len].decode()
    pos += kind_len
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"expected a {expect_kind!r} container, found {kind!r}")
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    header = json.loads(buf[pos:pos + hlen].decode())
    pos += hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = pos + e["offset"]
        end = start + count * dt.itemsize
        if end > len(buf):
            raise ContainerError(f"array {e['name']!r} truncated")
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(e["shape"]).copy()
    return kind, header["meta"], arrays


def save(path, kind: str, meta: dict, arrays: dict | None = None) -> None:
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(dumps(kind, meta, arrays))


def load(path, expect_kind: str | None = None):
    with open(os.fspath(path), "rb") as fh:
        return loads(fh.read(), expect_kind)
