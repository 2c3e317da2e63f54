"""Canonical byte encoding primitives.

Every wire structure serializes through Writer/Reader: fixed field order,
unsigned little-endian integers, u32 length prefixes for variable data,
and map-like collections sorted by key before encoding. Equal values
therefore produce identical bytes on every platform, which is what
signatures, digests, and golden traces rely on.

The full per-message byte layouts are documented in docs/wire-format.md.
"""

from __future__ import annotations

import struct


class CodecError(ValueError):
    """Raised on malformed, truncated, or out-of-range wire data."""


_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class Writer:
    __slots__ = ("_buf",)

    def __init__(self) -> None:
        self._buf = bytearray()

    def u8(self, value: int) -> "Writer":
        if not 0 <= value <= 0xFF:
            raise CodecError(f"u8 out of range: {value}")
        self._buf.append(value)
        return self

    def u32(self, value: int) -> "Writer":
        if not 0 <= value <= 0xFFFFFFFF:
            raise CodecError(f"u32 out of range: {value}")
        self._buf += _U32.pack(value)
        return self

    def u64(self, value: int) -> "Writer":
        if not 0 <= value <= 0xFFFFFFFFFFFFFFFF:
            raise CodecError(f"u64 out of range: {value}")
        self._buf += _U64.pack(value)
        return self

    def boolean(self, value: bool) -> "Writer":
        return self.u8(1 if value else 0)

    def raw(self, data: bytes) -> "Writer":
        self._buf += data
        return self

    def blob(self, data: bytes) -> "Writer":
        self.u32(len(data))
        self._buf += data
        return self

    def string(self, text: str) -> "Writer":
        return self.blob(text.encode("utf-8"))

    def finish(self) -> bytes:
        return bytes(self._buf)


class Reader:
    __slots__ = ("_data", "_pos")

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CodecError("truncated input")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def boolean(self) -> bool:
        v = self.u8()
        if v not in (0, 1):
            raise CodecError(f"invalid boolean byte: {v}")
        return v == 1

    def blob(self) -> bytes:
        n = self.u32()
        return self._take(n)

    def string(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError("invalid utf-8 string") from exc

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise CodecError(f"{len(self._data) - self._pos} trailing bytes")
