"""Binary tensor container ("SDVT" files).

Layout, all little-endian::

    magic   b"SDVT"
    version u32
    count   u32
    header  per entry: name_len u32, name utf-8, dtype u8 (0=f32, 1=f64),
            rank u32, dims u64 * rank, offset u64, nbytes u64
    hcrc    u32   CRC32 of everything above
    payloads, each followed by its own CRC32 (u32)

Offsets are absolute byte positions of each payload.
"""
from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SDVT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: dtype {arr.dtype} not storable (f32/f64 only)")
        entries.append((name, arr))

    def header_bytes(offsets):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(entries)))
        for (name, arr), off in zip(entries, offsets):
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(struct.pack("<QQ", off, arr.nbytes))
        return buf.getvalue()

    # header size does not depend on offset values
    pos = len(header_bytes([0] * len(entries))) + 4
    offsets = []
    for _, arr in entries:
        offsets.append(pos)
        pos += arr.nbytes + 4
    head = header_bytes(offsets)
    out = io.BytesIO()
    out.write(head)
    out.write(struct.pack("<I", zlib.crc32(head)))
    for _, arr in entries:
        payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        out.write(payload)
        out.write(struct.pack("<I", zlib.crc32(payload)))
    return out.getvalue()


def decode(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    meta = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        if name_len > len(view):
            raise FormatError("corrupt entry table")
        name = bytes(take(name_len)).decode("utf-8", errors="replace")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _DTYPES or rank > 32:
            raise FormatError(f"corrupt entry table near {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        offset, nbytes = struct.unpack("<QQ", take(16))
        meta.append((name, _DTYPES[code], dims, offset, nbytes))
    head_end = pos
    (hcrc,) = struct.unpack("<I", take(4))
    if zlib.crc32(view[:head_end]) != hcrc:
        raise FormatError("header CRC mismatch")
    out: dict[str, np.ndarray] = {}
    prev_end = head_end + 4
    for name, dtype, dims, offset, nbytes in meta:
        if offset < prev_end:
            raise FormatError(f"{name}: overlapping payload")
        if nbytes != dtype.itemsize * int(np.prod(dims, dtype=np.int64)):
            raise FormatError(f"{name}: payload size disagrees with shape {dims}")
        end = offset + nbytes
        if end + 4 > len(view):
            raise FormatError(f"{name}: truncated payload")
        payload = view[offset:end]
        (crc,) = struct.unpack("<I", view[end:end + 4])
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{name}: CRC mismatch")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        prev_end = end + 4
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
