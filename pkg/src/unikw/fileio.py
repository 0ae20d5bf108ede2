"""Binary file plumbing: CRC-64 checksums, LEB128 varints, safe reads.

All on-disk formats in this package share the same skeleton: a 4-byte
magic, a little-endian header, a body, and a trailing CRC-64 of every
byte before it.  The helpers here keep that convention in one place.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

from .errors import ValidationError

_CRC64_POLY = 0x42F0E1EBA9EA3693  # ECMA-182
_MASK64 = (1 << 64) - 1


def _build_crc64_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 56
        for _ in range(8):
            if crc & (1 << 63):
                crc = ((crc << 1) ^ _CRC64_POLY) & _MASK64
            else:
                crc = (crc << 1) & _MASK64
        table.append(crc)
    return table


_CRC64_TABLE = _build_crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/ECMA-182 of ``data``, continuing from ``crc``."""
    table = _CRC64_TABLE
    for b in data:
        crc = ((crc << 8) & _MASK64) ^ table[((crc >> 56) ^ b) & 0xFF]
    return crc


def write_uvarint(buf: bytearray, value: int) -> None:
    """Append ``value`` as an unsigned LEB128 varint."""
    if value < 0:
        raise ValidationError("varint value must be non-negative")
    while value >= 0x80:
        buf.append((value & 0x7F) | 0x80)
        value >>= 7
    buf.append(value)


def read_uvarint(data: bytes, pos: int) -> tuple[int, int]:
    """Decode an unsigned LEB128 varint at ``pos``; return (value, next pos)."""
    value = 0
    shift = 0
    n = len(data)
    while True:
        if pos >= n:
            raise ValidationError("truncated file: varint runs past end of data")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise ValidationError("varint too long")


def take(data: bytes, pos: int, count: int) -> tuple[bytes, int]:
    """Slice ``count`` bytes at ``pos``, raising on truncation."""
    end = pos + count
    if end > len(data):
        raise ValidationError("truncated file: unexpected end of data")
    return data[pos:end], end


def unpack_at(fmt: str, data: bytes, pos: int) -> tuple[tuple, int]:
    """``struct.unpack`` at ``pos`` with truncation checking."""
    size = struct.calcsize(fmt)
    raw, pos = take(data, pos, size)
    return struct.unpack(fmt, raw), pos


def check_magic(data: bytes, magic: bytes) -> int:
    """Verify a leading magic string; return the position after it."""
    if len(data) < len(magic) or data[: len(magic)] != magic:
        raise ValidationError(f"bad magic: expected {magic!r}")
    return len(magic)


def split_checksummed(data: bytes) -> bytes:
    """Verify and strip the trailing CRC-64 footer, returning the payload."""
    if len(data) < 8:
        raise ValidationError("truncated file: missing checksum footer")
    payload, footer = data[:-8], data[-8:]
    (expected,) = struct.unpack("<Q", footer)
    if crc64(payload) != expected:
        raise ValidationError("checksum mismatch")
    return payload


def append_checksum(buf: bytearray) -> bytes:
    """Append the CRC-64 footer and return immutable bytes."""
    buf.extend(struct.pack("<Q", crc64(bytes(buf))))
    return bytes(buf)


def read_file(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def write_file(path, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)


def read_exact(f: BinaryIO, count: int) -> bytes:
    raw = f.read(count)
    if len(raw) != count:
        raise ValidationError("truncated file: unexpected end of data")
    return raw
