"""Versioned parameter container shared by the VAE and PCA models.

Layout::

    b"DCLNMODL"                  8-byte magic
    uint32 LE                    header length in bytes
    header                       UTF-8 JSON (sorted keys)
    blob                         little-endian float64 tensors, back to back

The header records the format version, a ``kind`` tag, free-form metadata,
one ``{name, shape, offset}`` entry per tensor and the SHA-256 of the blob.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCLNMODL"
FORMAT_VERSION = 1


class LoadError(ValueError):
    pass


class VersionError(LoadError):
    pass


class ChecksumError(LoadError):
    pass


class ShapeConsistencyError(LoadError):
    pass


def dumps(kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": entries,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + blob


def loads(data: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < 12 or data[:8] != MAGIC:
        raise LoadError("not a model container (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {header.get('format_version')!r}")
    blob = data[12 + hlen:]
    if len(blob) != header["blob_bytes"] or hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ChecksumError("parameter blob failed checksum (truncated or corrupted)")
    tensors = {}
    expected = 0
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 8 * math.prod(shape)
        if entry["offset"] != expected or expected + nbytes > len(blob):
            raise ShapeConsistencyError(f"tensor {entry['name']!r}: shape {shape} inconsistent with blob layout")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=math.prod(shape), offset=expected).reshape(shape).copy()
        expected += nbytes
    if expected != len(blob):
        raise ShapeConsistencyError("tensor table does not cover the parameter blob")
    return header["kind"], header["meta"], tensors


def save(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, tensors))


def load(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def peek_kind(path) -> str:
    """The ``kind`` tag, read from the header alone."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:8] != MAGIC:
            raise LoadError(f"{path}: not a model container (bad magic)")
        (hlen,) = struct.unpack("<I", head[8:12])
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise LoadError(f"unreadable header: {exc}") from exc
    return header.get("kind", "")
