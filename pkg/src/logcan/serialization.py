"""Binary tensor (``LGT1``) and checkpoint (``LGC1``) files.

LGT1 layout::

    0..3   magic b"LGT1"
    4      rank (u8, 1..5)
    5      dtype code (u8; 0 = float32, 1 = float64)
    6..    rank little-endian u32 extents
    ...    row-major little-endian payload

LGC1 layout: magic b"LGC1", u32 entry count, then per entry a u16 name
length, the UTF-8 name and an embedded LGT1 record.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import MAX_RANK, Tensor

TENSOR_MAGIC = b"LGT1"
CHECKPOINT_MAGIC = b"LGC1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Malformed or truncated LGT1/LGC1 data."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_tensor(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ValueError(f"rank must be in 1..{MAX_RANK}, got shape {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"cannot save tensor with an empty extent: shape {arr.shape}")
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    header = TENSOR_MAGIC + struct.pack("<BB", arr.ndim, code) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one LGT1 record starting at ``offset``; returns the tensor and the end offset."""
    if len(buf) - offset < 6:
        raise FormatError(f"truncated LGT1 header: need 6 bytes, found {len(buf) - offset}", offset)
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {TENSOR_MAGIC!r}", offset)
    rank, code = buf[offset + 4], buf[offset + 5]
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"rank {rank} outside 1..{MAX_RANK}", offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    pos = offset + 6
    if len(buf) - pos < 4 * rank:
        raise FormatError(f"truncated extents: need {4 * rank} bytes, found {len(buf) - pos}", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    for i, extent in enumerate(shape):
        if extent == 0:
            raise FormatError(f"extent {i} is zero", pos + 4 * i)
    pos += 4 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes, found {len(buf) - pos}", pos)
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="))), pos + nbytes


def save_tensor(path, x) -> None:
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after LGT1 record", end)
    return t


def encode_checkpoint(entries: Mapping[str, object]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        parts += [struct.pack("<H", len(raw)), raw, encode_tensor(value)]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, Tensor]:
    if len(buf) < 8:
        raise FormatError(f"truncated LGC1 header: need 8 bytes, found {len(buf)}", 0)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out: dict[str, Tensor] = {}
    for _ in range(count):
        if len(buf) - pos < 2:
            raise FormatError("truncated entry name length", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < n:
            raise FormatError(f"truncated entry name: need {n} bytes, found {len(buf) - pos}", pos)
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry name is not UTF-8: {exc}", pos) from None
        if name in out:
            raise FormatError(f"duplicate entry {name!r}", pos)
        pos += n
        out[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry", pos)
    return out


def save_checkpoint(path, entries: Mapping[str, object]) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> dict[str, Tensor]:
    return decode_checkpoint(Path(path).read_bytes())
