"""Named-tensor checkpoint files.

Layout (little endian)::

    magic   b"TGTCK1"
    version u32
    header  u32 length + UTF-8 JSON  (config_hash, seed, epoch, ...)
    count   u32
    count x { u16 name length, name, u8 ndim, ndim x u64 dims, f64 data }
    crc32   u32 over everything before it
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"TGTCK1"
VERSION = 1


class CheckpointError(IOError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray], header: Mapping[str, Any]) -> bytes:
    head = json.dumps(dict(header), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < len(MAGIC) + 16 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", body, pos + 4)
    pos += 8
    header = json.loads(body[pos : pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2 : pos + 2 + klen].decode()
        pos += 2 + klen
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}Q", body, pos + 1)
        pos += 1 + 8 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors, header


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], header: Mapping[str, Any]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, header))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode_checkpoint(Path(path).read_bytes())
