"""The "VSPT" tensor container shared by model, prompt and corpus files.

Layout (all integers little-endian)::

    b"VSPT"  u32 version  u32 entry_count
    entry_count x [ u32 name_len, name (UTF-8), u32 rank, rank x u64 dim,
                    prod(dims) x f64 ]

Free-form metadata travels as one extra record named ``__meta__``: a rank-1
tensor whose values are the byte codes of a UTF-8 JSON object.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"VSPT"
VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def _meta_record(meta: Mapping) -> np.ndarray:
    raw = json.dumps(dict(meta), sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def encode(entries: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    items = list(entries.items())
    if meta is not None:
        items.append((META_KEY, _meta_record(meta)))
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.array(arr, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a VSPT file (bad magic bytes)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated VSPT file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported VSPT version {version} (expected {VERSION})")
    entries: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        if name == META_KEY:
            meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
        else:
            entries[name] = arr
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last VSPT record")
    return entries, meta


def save(path, entries: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(entries, meta))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def digest(entries: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(entries):
        arr = np.array(entries[name], dtype="<f8", order="C")
        h.update(name.encode("utf-8"))
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
