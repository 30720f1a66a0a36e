"""Binary tensor container ("TSIN") used for checkpoints.

Layout (little endian)::

    b"TSIN" | version u32 | entry count u32 |
    per entry: name length u32, UTF-8 name, rank u32, dims u32 * rank, float32 * prod(dims)

Non-tensor metadata travels as a float32 entry holding one UTF-8 byte per element.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TSIN"
VERSION = 1
META_ENTRY = "meta.json"


class CheckpointError(Exception):
    code = "checkpoint"


class BadContainerError(CheckpointError):
    code = "bad_container"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


class ConfigMismatchError(CheckpointError):
    code = "config_mismatch"


def encode_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.float32)


def decode_bytes(arr: np.ndarray) -> bytes:
    return np.asarray(arr).astype(np.uint8).tobytes()


def write_container(path, entries: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    items = dict(entries)
    if meta is not None:
        items[META_ENTRY] = encode_bytes(json.dumps(meta, sort_keys=True).encode("utf-8"))
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, value in items.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"container truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals[0] if n == 1 else vals


def read_container(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Return ``(tensors, meta)``; raises a ``CheckpointError`` subclass on malformed input."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadContainerError(f"{path}: bad container (magic bytes {data[:4]!r})")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {VERSION}")
    count = r.u32()
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()
        entries[name] = arr
    if r.pos != len(data):
        raise BadContainerError(f"{path}: {len(data) - r.pos} trailing bytes after last entry")
    meta = None
    if META_ENTRY in entries:
        meta = json.loads(decode_bytes(entries.pop(META_ENTRY)).decode("utf-8"))
    return entries, meta
