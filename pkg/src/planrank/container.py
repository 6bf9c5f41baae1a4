"""Versioned binary container shared by checkpoints and OOD detector files.

Layout::

    PLANRANK\\n
    <header: one line of canonical JSON>\\n
    <payload: float64 little-endian blobs, back to back>

The header carries ``format_version``, ``kind``, free-form ``meta``, the
tensor table (name, shape, byte offset), the payload length and a SHA-256
checksum over the header (minus the checksum field) plus the payload.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from planrank.errors import CorruptFile, VersionMismatch

MAGIC = b"PLANRANK\n"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _digest(header: dict, payload: bytes) -> str:
    h = hashlib.sha256()
    h.update(_canonical(header))
    h.update(payload)
    return h.hexdigest()


def encode_container(kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    table, blobs, offset = [], [], 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype=_LE_F64)
        blob = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": table,
        "payload_bytes": len(payload),
    }
    header["checksum"] = _digest(header, payload)
    return MAGIC + _canonical(header) + b"\n" + payload


def write_container(path: str | Path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(kind, meta, tensors))


def read_header(raw: bytes) -> tuple[dict, bytes]:
    if not raw.startswith(MAGIC):
        raise CorruptFile("missing container magic")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptFile("truncated header")
    try:
        header = json.loads(raw[len(MAGIC):end])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptFile("header is not an object")
    return header, raw[end + 1:]


def decode_container(raw: bytes, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    header, payload = read_header(raw)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"container format_version {version!r} != {FORMAT_VERSION}")
    if header.get("kind") != kind:
        raise VersionMismatch(f"expected a {kind!r} file, got {header.get('kind')!r}")
    if len(payload) != header.get("payload_bytes"):
        raise CorruptFile(f"payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    stored = header.pop("checksum", None)
    if stored != _digest(header, payload):
        raise CorruptFile("checksum mismatch")
    tensors = {}
    try:
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            start = entry["offset"]
            arr = np.frombuffer(payload, dtype=_LE_F64, count=count, offset=start)
            tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"bad tensor table: {exc}") from exc
    return header["meta"], tensors


def read_container(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes(), kind)
