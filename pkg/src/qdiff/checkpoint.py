"""Binary checkpoint format for :class:`~qdiff.tensor.ParamTree`.

Layout (all integers little-endian)::

    magic    4 bytes  b"QDCK"
    version  uint32   1
    count    uint32   number of entries
    entries  count times:
        name_len uint32, name utf-8 bytes,
        rank uint32, dims uint64 * rank,
        payload float64 * prod(dims)
    crc32    uint32   zlib.crc32 of every preceding byte

Entries are written in tree order, so a tree round-trips with its ordering.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .tensor import ParamTree

MAGIC = b"QDCK"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for corrupt, truncated or incompatible checkpoint files."""


def dumps(tree: ParamTree) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tree))]
    for name, arr in tree.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> ParamTree:
    if len(blob) < 16:
        raise CheckpointError(f"checkpoint is only {len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    tree = ParamTree()

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise CheckpointError(f"truncated at byte {off}")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    for _ in range(count):
        (n,) = take("<I")
        name = body[off : off + n].decode("utf-8")
        off += n
        (rank,) = take("<I")
        dims = take(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64)) * 8
        if off + size > len(body):
            raise CheckpointError(f"truncated payload for {name!r} at byte {off}")
        tree[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=off).reshape(dims).astype(np.float64)
        off += size
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} trailing bytes after last entry")
    return tree


def save(tree: ParamTree, path, meta: dict | None = None):
    """Write ``tree`` to ``path``; optional ``meta`` goes to a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tree))
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load(path) -> ParamTree:
    return loads(Path(path).read_bytes())


def load_meta(path) -> dict | None:
    side = Path(str(path) + ".json")
    return json.loads(side.read_text()) if side.exists() else None
