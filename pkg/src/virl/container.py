"""Versioned binary container shared by discriminators, policies and reward bundles.

Layout (little endian)::

    magic  b"VIRLBIN\\0"          8 bytes
    format version              uint16
    header length               uint32
    header                      UTF-8 JSON: kind, meta, array table
    payload                     arrays as row-major float64/int64, in table order
    digest                      sha256 over everything above, 32 bytes
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VIRLBIN\0"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Corrupt, truncated or mismatched container."""


def pack(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    table = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        arr = np.ascontiguousarray(arr, dtype=dtype)
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    header = json.dumps({"kind": kind, "meta": meta, "arrays": table}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def unpack(blob: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 6 + 32 or not blob.startswith(MAGIC):
        raise ContainerError("not a virl container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError("checksum mismatch")
    version, hlen = struct.unpack_from("<HI", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = len(MAGIC) + 6
    header = json.loads(body[start:start + hlen].decode())
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header['kind']!r}")
    offset = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(body):
            raise ContainerError("truncated payload")
        arrays[entry["name"]] = np.frombuffer(body, dtype, count, offset).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(body):
        raise ContainerError("trailing bytes in payload")
    return {"kind": header["kind"], **header["meta"]}, arrays


def write(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack(kind, meta, arrays))


def read(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes(), kind)
