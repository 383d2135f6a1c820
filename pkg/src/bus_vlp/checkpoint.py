"""Flat binary tensor container used for weights and trainer state.

Layout (little-endian): magic ``BUSW``, version u16, tensor count u32; then
per tensor: name length u16, UTF-8 name, rank u8, extents u32 each, float64
payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"BUSW"
VERSION = 1


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(tensors))
    for name, array in tensors.items():
        array = np.asarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape)
        out += np.ascontiguousarray(array).tobytes()
    return bytes(out)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint reading {what} at byte offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic at byte offset 0")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * size, f"data of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"trailing bytes at byte offset {pos}")
    return tensors


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    return path


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
