"""Versioned binary parameter container.

Layout (little-endian)::

    b"ADVLM" | u32 version | u32 precision bits | u32 V | u32 e | u32 h | u32 layers
    u32 block count
    per block: u32 name length | name (utf-8) | u32 ndim | u64 dims... | f64 values (row-major)
    u32 meta length | meta (utf-8 JSON, sorted keys)
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, IoFailure, VersionMismatch

MAGIC = b"ADVLM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<5sIIIIII")


@dataclass
class CheckpointData:
    precision: int
    vocab_size: int
    emb_dim: int
    hidden_dim: int
    n_layers: int
    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def encode(ck: CheckpointData) -> bytes:
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, ck.precision, ck.vocab_size, ck.emb_dim, ck.hidden_dim, ck.n_layers),
        struct.pack("<I", len(ck.blocks)),
    ]
    for name, arr in ck.blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    meta = json.dumps(ck.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> CheckpointData:
    if len(buf) < _HEADER.size + 8 or buf[:5] != MAGIC:
        raise CorruptCheckpoint("not an ADVLM checkpoint (bad magic or too short)")
    magic, version, precision, vocab, emb, hidden, layers = _HEADER.unpack_from(buf, 0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("checksum mismatch (truncated or damaged file)")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        pos = _HEADER.size
        (n_blocks,) = struct.unpack_from("<I", body, pos)
        pos += 4
        blocks = {}
        for _ in range(n_blocks):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(body):
                raise CorruptCheckpoint(f"block {name!r} runs past end of file")
            blocks[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos : pos + n].decode("utf-8"))
        pos += n
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CorruptCheckpoint(f"malformed checkpoint: {e}") from e
    if pos != len(body):
        raise CorruptCheckpoint("trailing bytes after metadata")
    return CheckpointData(precision, vocab, emb, hidden, layers, blocks, meta)


def write(path, ck: CheckpointData) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode(ck))
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(f"cannot write checkpoint {path}: {e}") from e


def read(path) -> CheckpointData:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
    return decode(buf)
