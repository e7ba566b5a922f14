"""Versioned binary container used by every on-disk artifact.

Layout (all integers little-endian)::

    magic     4 bytes   e.g. b"PTXD"
    version   u32
    hdr_len   u32
    header    hdr_len bytes of UTF-8 JSON: {"meta": {...}, "arrays": [...]}
    blobs     raw C-order array bytes, concatenated in header order

Each array entry records name, dtype, shape, nbytes and a CRC32 of its blob, so
truncation and bit rot are reported with the byte offset where decoding failed.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

_PREFIX = struct.Struct("<4sII")


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blobs.append(raw)
    header = canonical_json({"meta": meta, "arrays": entries})
    return _PREFIX.pack(magic, version, len(header)) + header + b"".join(blobs)


def decode(data: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise FormatError(f"file too short for header prefix ({len(data)} bytes)", offset=len(data))
    got_magic, got_version, hdr_len = _PREFIX.unpack_from(data, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", offset=0)
    if got_version != version:
        raise FormatError(
            f"unsupported format version {got_version} (this build reads version {version})", offset=4
        )
    start = _PREFIX.size
    if start + hdr_len > len(data):
        raise FormatError(
            f"header declares {hdr_len} bytes but only {len(data) - start} remain", offset=len(data)
        )
    try:
        header = json.loads(data[start : start + hdr_len].decode("utf-8"))
        entries = header["arrays"]
        meta = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed JSON header: {exc}", offset=start) from exc

    arrays: dict[str, np.ndarray] = {}
    pos = start + hdr_len
    for entry in entries:
        try:
            name, dtype = entry["name"], np.dtype(entry["dtype"])
            shape, nbytes, crc = tuple(entry["shape"]), int(entry["nbytes"]), int(entry["crc32"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed array entry {entry!r}: {exc}", offset=start) from exc
        if pos + nbytes > len(data):
            raise FormatError(
                f"array {name!r} truncated: need {nbytes} bytes, {len(data) - pos} available", offset=pos
            )
        raw = data[pos : pos + nbytes]
        if zlib.crc32(raw) != crc:
            raise FormatError(f"checksum mismatch in array {name!r}", offset=pos)
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != nbytes:
            raise FormatError(f"array {name!r}: shape {shape} inconsistent with {nbytes} bytes", offset=pos)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last array", offset=pos)
    return meta, arrays


def write(path: str | Path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a container and return the SHA-256 of the bytes written."""
    payload = encode(magic, version, meta, arrays)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read(path: str | Path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic, version)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
