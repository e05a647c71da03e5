"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"TBNETCKP"
    version      uint32
    config_len   uint32
    config       config_len bytes of canonical JSON (NetworkConfig)
    payload_len  uint64
    payload      float32 LE: parameters in declaration order, then buffers
    crc32        uint32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import Network, NetworkConfig

MAGIC = b"TBNETCKP"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sII")
_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _state_arrays(model: Network) -> list[np.ndarray]:
    return [p.data for p in model.parameters()] + [b for _, b in model.named_buffers()]


def encode(model: Network) -> bytes:
    config = model.config.canonical_json().encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in _state_arrays(model))
    body = (_HEAD.pack(MAGIC, FORMAT_VERSION, len(config)) + config
            + _U64.pack(len(payload)) + payload)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model: Network, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model))
    os.replace(tmp, path)


def decode(blob: bytes) -> Network:
    if len(blob) < _HEAD.size + _U64.size + _U32.size:
        raise ChecksumError(f"checkpoint truncated ({len(blob)} bytes)")
    magic, version, config_len = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a tbnet checkpoint (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (stored_crc,) = _U32.unpack_from(blob, len(blob) - _U32.size)
    if zlib.crc32(blob[:-_U32.size]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("checkpoint CRC-32 mismatch (file corrupt or truncated)")

    off = _HEAD.size
    config = NetworkConfig.from_dict(json.loads(blob[off:off + config_len].decode("utf-8")))
    off += config_len
    (payload_len,) = _U64.unpack_from(blob, off)
    off += _U64.size
    if off + payload_len != len(blob) - _U32.size:
        raise ShapeMismatchError("payload length disagrees with file size")
    payload = np.frombuffer(blob, dtype="<f4", count=payload_len // 4, offset=off)

    model = Network(config, np.random.default_rng(0))
    arrays = _state_arrays(model)
    expected = sum(a.size for a in arrays)
    if expected * 4 != payload_len:
        raise ShapeMismatchError(
            f"config describes {expected} scalars but payload holds {payload_len // 4}"
        )
    params = model.parameters()
    pos = 0
    for i, a in enumerate(arrays):
        chunk = payload[pos:pos + a.size].reshape(a.shape).astype(np.float32)
        pos += a.size
        if i < len(params):
            params[i].data = chunk
        else:
            a[...] = chunk
    return model


def load_checkpoint(path: str | os.PathLike) -> Network:
    return decode(Path(path).read_bytes())
