"""Binary container shared by model checkpoints, adapters and heads.

Layout (all integers little-endian)::

    magic        4 bytes ("FTLM", "FTLA", ...)
    version      u32, currently 1
    config_len   u32
    config       UTF-8 JSON, config_len bytes
    param_count  u32
    per parameter:
        name_len u16, name UTF-8, rank u8, rank x u32 extents,
        prod(extents) x float32 IEEE-754
    crc32        u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedError, VersionError

VERSION = 1
MAX_RANK = 3
_F32 = np.dtype("<f4")


def encode_container(magic: bytes, config: dict, params: Mapping[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(f"file ends early: needed {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(buf: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 8:
        raise TruncatedError("file shorter than the container header")
    if buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {buf[:4]!r}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (this build reads {VERSION})")
    if len(buf) < 12:
        raise TruncatedError("file shorter than the container header")
    reader = _Reader(buf, len(buf) - 4)
    reader.pos = 8
    (cfg_len,) = reader.unpack("<I")
    try:
        config = json.loads(reader.take(cfg_len).decode("utf-8"))
        (count,) = reader.unpack("<I")
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (rank,) = reader.unpack("<B")
            if rank > MAX_RANK:
                raise ValueError(f"parameter {name!r} has rank {rank}")
            shape = reader.unpack(f"<{rank}I")
            n = int(np.prod(shape, dtype=np.int64))
            raw = reader.take(n * 4)
            params[name] = np.frombuffer(raw, dtype=_F32).astype(np.float32).reshape(shape)
    except (UnicodeDecodeError, ValueError) as exc:
        # corrupted text or shape fields; report as checksum failure when the crc disagrees
        _verify_crc(buf)
        raise ChecksumError(f"unreadable container contents: {exc}") from exc
    if reader.pos != reader.end:
        _verify_crc(buf)
        raise TruncatedError(f"{reader.end - reader.pos} unexpected bytes before checksum")
    _verify_crc(buf)
    return config, params


def _verify_crc(buf: bytes) -> None:
    (stored,) = struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")


def write_container(path: str | Path, magic: bytes, config: dict, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(magic, config, params))


def read_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes(), magic)
