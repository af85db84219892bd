"""Versioned checkpoint container.

Layout: 8-byte magic, little-endian uint32 header length, a UTF-8 JSON
header (metadata plus a table of named tensors), then every tensor as raw
little-endian float64 in table order. No timestamps, so identical models
serialize to identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from mcadv.errors import DataError, ParseError

MAGIC = b"MCADVCK\x00"
FORMAT_VERSION = 1


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    table = [{"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()]
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "tensors": table},
                        sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in tensors.values())
    return MAGIC + struct.pack("<I", len(header)) + header + body


def loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", 0)
    if len(raw) < 12:
        raise ParseError("truncated checkpoint header", len(raw))
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}", 12) from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('format_version')}", 12)
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise ParseError(f"truncated tensor {entry['name']!r}", len(raw))
        tensors[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise ParseError("trailing bytes after checkpoint payload", offset)
    return header["meta"], tensors


def save(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"no such checkpoint: {path}") from exc
    return loads(raw)
