"""Flat binary container for named tensors.

Layout (little-endian)::

    b"ADRP" | u16 version | u32 count
    count x { u16 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64) | u8 rank
              | rank x u32 dims | payload (row-major) }
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError, IntegrityError
from .tensor import Tensor

MAGIC = b"ADRP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_checkpoint(tensors: Mapping[str, Tensor | np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t)
        if arr.dtype not in _TAGS:
            raise ContractError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractError(f"{name}: name too long")
        if arr.ndim > 0xFF:
            raise ContractError(f"{name}: rank too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 14:
        raise IntegrityError("truncated file: shorter than header + crc")
    if buf[:4] != MAGIC:
        raise IntegrityError(f"bad magic {buf[:4]!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError("crc32 mismatch")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported format version {version} (expected {VERSION})")
    off = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", body, off)
            off += 2
            if tag not in _DTYPES:
                raise IntegrityError(f"{name}: unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(body):
                raise IntegrityError(f"{name}: payload runs past end of file")
            arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims)
            off += nbytes
            if name in out:
                raise IntegrityError(f"duplicate tensor name {name!r}")
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    except struct.error as e:
        raise IntegrityError(f"truncated record: {e}") from e
    if off != len(body):
        raise IntegrityError("trailing bytes after last tensor")
    return out


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(tensors: Mapping[str, Tensor | np.ndarray], path: str | os.PathLike) -> None:
    atomic_write(path, encode_checkpoint(tensors))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
