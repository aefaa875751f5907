"""Binary checkpoint format.

Layout (little-endian)::

    b"BDET"  u32 version  u32 record_count
    record*: u32 name_len, name (utf-8), u32 rank, u64 extent * rank, f64 data
    u32 metadata_len, metadata (utf-8 JSON, sorted keys)

Records hold parameters, batch-norm statistics (``bn/<layer>.mean|var``) and
Adam moments (``adam.m/<param>``, ``adam.v/<param>``).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from bayesgrid.errors import DataError

MAGIC = b"BDET"
VERSION = 1


def encode(records, metadata):
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def decode(buf):
    if buf[:4] != MAGIC:
        raise DataError("not a checkpoint: bad magic at byte offset 0")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise DataError(f"truncated checkpoint at byte offset {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    records = {}
    for _ in range(count):
        (n,) = take("<I")
        name = bytes(buf[pos : pos + n]).decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        if pos + 8 * size > len(buf):
            raise DataError(f"truncated record {name!r} at byte offset {pos}")
        records[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    (mlen,) = take("<I")
    if pos + mlen != len(buf):
        raise DataError(f"metadata at byte offset {pos} declares {mlen} bytes, {len(buf) - pos} present")
    try:
        metadata = json.loads(bytes(buf[pos:]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint metadata at byte offset {pos}: {exc}") from None
    return records, metadata


def save(path, records, metadata):
    with open(path, "wb") as fh:
        fh.write(encode(records, metadata))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
