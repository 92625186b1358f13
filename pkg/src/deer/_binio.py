"""Hashing and binary file-format primitives shared across modules.

All on-disk formats are little-endian and end with a CRC-32C checksum of
every preceding byte. FNV-1a (64-bit) is the portable bucket hash used for
out-of-vocabulary n-grams and category names.
"""

from __future__ import annotations

import struct

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a regular dependency
    _HAVE_NUMBA = False

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _U64_MASK
    return h


# CRC-32C (Castagnoli), reflected polynomial 0x82F63B78.
def _build_crc32c_table() -> np.ndarray:
    table = np.empty(256, dtype=np.uint32)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0x82F63B78 if crc & 1 else crc >> 1
        table[i] = crc
    return table


_CRC_TABLE = _build_crc32c_table()

if _HAVE_NUMBA:

    @njit(cache=True)
    def _crc32c_kernel(data: np.ndarray, table: np.ndarray, crc: np.uint32) -> np.uint32:
        for i in range(data.shape[0]):
            crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8)
        return crc

    def crc32c(data: bytes, value: int = 0) -> int:
        buf = np.frombuffer(data, dtype=np.uint8)
        crc = _crc32c_kernel(buf, _CRC_TABLE, np.uint32(value ^ 0xFFFFFFFF))
        return int(crc) ^ 0xFFFFFFFF

else:  # pragma: no cover - exercised only without numba

    def crc32c(data: bytes, value: int = 0) -> int:
        crc = value ^ 0xFFFFFFFF
        table = _CRC_TABLE
        for byte in data:
            crc = int(table[(crc ^ byte) & 0xFF]) ^ (crc >> 8)
        return crc ^ 0xFFFFFFFF


class FormatError(Exception):
    """A binary artifact fails validation (magic, version, checksum, size)."""


class ChecksumWriter:
    """Accumulates little-endian binary output and appends a CRC-32C trailer."""

    def __init__(self, magic: bytes):
        if len(magic) != 8:
            raise ValueError("magic must be 8 bytes")
        self._chunks = [magic]

    def write_u32(self, value: int) -> None:
        self._chunks.append(struct.pack("<I", value))

    def write_u64(self, value: int) -> None:
        self._chunks.append(struct.pack("<Q", value))

    def write_f32(self, value: float) -> None:
        self._chunks.append(struct.pack("<f", value))

    def write_f32_array(self, array: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    def write_array(self, array: np.ndarray, dtype: str) -> None:
        self._chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())

    def write_str(self, text: str) -> None:
        raw = text.encode("utf-8")
        self._chunks.append(struct.pack("<I", len(raw)))
        self._chunks.append(raw)

    def save(self, path) -> None:
        body = b"".join(self._chunks)
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(struct.pack("<I", crc32c(body)))


class ChecksumReader:
    """Validates and decodes a file produced by :class:`ChecksumWriter`."""

    def __init__(self, path, magic: bytes):
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 12:
            raise FormatError(f"{path}: truncated file ({len(blob)} bytes)")
        body, trailer = blob[:-4], blob[-4:]
        expected = struct.unpack("<I", trailer)[0]
        actual = crc32c(body)
        if actual != expected:
            raise FormatError(
                f"{path}: checksum mismatch (stored {expected:#010x}, computed {actual:#010x})"
            )
        if body[:8] != magic:
            raise FormatError(
                f"{path}: bad magic {body[:8]!r}, expected {magic!r} (wrong or incompatible file)"
            )
        self._body = body
        self._pos = 8
        self._path = path

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._body):
            raise FormatError(f"{self._path}: truncated file (needed {n} more bytes)")
        out = self._body[self._pos : self._pos + n]
        self._pos += n
        return out

    def read_u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def read_u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def read_f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def read_f32_array(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    def read_array(self, shape: tuple, dtype: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(itemsize * count)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def read_str(self) -> str:
        n = struct.unpack("<I", self._take(4))[0]
        return self._take(n).decode("utf-8")

    def expect_end(self) -> None:
        if self._pos != len(self._body):
            raise FormatError(
                f"{self._path}: {len(self._body) - self._pos} unexpected trailing bytes"
            )
