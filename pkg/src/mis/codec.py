"""Canonical binary encoding for everything that gets hashed or signed.

Fixed field order, big-endian fixed-width integers, and u32 length
prefixes on variable-size byte strings. Two nodes that encode the same
object always produce the same bytes.
"""

from __future__ import annotations

import struct


class DecodeError(ValueError):
    pass


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">B", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">Q", v))
        return self

    def f64(self, v: float) -> "Writer":
        self._parts.append(struct.pack(">d", float(v)))
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def blob(self, b: bytes) -> "Writer":
        self._parts.append(struct.pack(">I", len(b)))
        self._parts.append(bytes(b))
        return self

    def text(self, s: str) -> "Writer":
        return self.blob(s.encode("utf-8"))

    def opt_blob(self, b: bytes | None) -> "Writer":
        if b is None:
            return self.u8(0)
        return self.u8(1).blob(b)

    def opt_text(self, s: str | None) -> "Writer":
        if s is None:
            return self.u8(0)
        return self.u8(1).text(s)

    def uint(self, v: int) -> "Writer":
        """Arbitrary-precision unsigned integer, minimal big-endian bytes."""
        if v < 0:
            raise ValueError("uint must be non-negative")
        return self.blob(v.to_bytes((v.bit_length() + 7) // 8, "big"))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_buf", "_pos")

    def __init__(self, buf: bytes) -> None:
        self._buf = memoryview(buf)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise DecodeError(f"truncated input: need {n} bytes at offset {self._pos}")
        out = bytes(self._buf[self._pos:end])
        self._pos = end
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def opt_blob(self) -> bytes | None:
        return self.blob() if self.u8() else None

    def opt_text(self) -> str | None:
        return self.text() if self.u8() else None

    def uint(self) -> int:
        return int.from_bytes(self.blob(), "big")

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._buf)

    def expect_end(self) -> None:
        if not self.exhausted:
            raise DecodeError(f"{len(self._buf) - self._pos} trailing bytes")
