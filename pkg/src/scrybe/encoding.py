"""Byte-exact canonical encoding.

Integers are big-endian and fixed width, strings and byte blobs carry a
4-byte length prefix, lists a 4-byte count, optionals a 1-byte flag.
Digests, nonces and signatures are fixed width and written raw.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, TypeVar

from .crypto import DIGEST_SIZE, SIGNATURE_SIZE, Digest, Signature

T = TypeVar("T")

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class DecodeError(ValueError):
    pass


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(_U8.pack(value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(_U32.pack(value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(_U64.pack(value))
        return self

    def raw(self, value: bytes) -> "Writer":
        self._parts.append(bytes(value))
        return self

    def blob(self, value: bytes) -> "Writer":
        self._parts.append(_U32.pack(len(value)))
        self._parts.append(bytes(value))
        return self

    def string(self, value: str) -> "Writer":
        # str.encode rejects lone surrogates, the only non-encodable input
        return self.blob(value.encode("utf-8"))

    def digest(self, value: bytes) -> "Writer":
        if len(value) != DIGEST_SIZE:
            raise ValueError("digest must be 32 bytes")
        return self.raw(value)

    def signature(self, sig: Signature) -> "Writer":
        return self.raw(sig.value).raw(sig.signer)

    def optional(self, value: T | None, write: Callable[["Writer", T], object]) -> "Writer":
        if value is None:
            return self.u8(0)
        self.u8(1)
        write(self, value)
        return self

    def sequence(self, items: Iterable[T], write: Callable[["Writer", T], object]) -> "Writer":
        items = list(items)
        self.u32(len(items))
        for item in items:
            write(self, item)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_data", "_pos")

    def __init__(self, data: bytes) -> None:
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise DecodeError(f"truncated input: need {n} bytes at offset {self._pos}")
        out = self._data[self._pos:end].tobytes()
        self._pos = end
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        return self._take(self.u32())

    def string(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8: {exc}") from None

    def digest(self) -> Digest:
        return Digest(self._take(DIGEST_SIZE))

    def signature(self) -> Signature:
        value = self._take(SIGNATURE_SIZE)
        return Signature(value, self.digest())

    def optional(self, read: Callable[["Reader"], T]) -> T | None:
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise DecodeError(f"bad presence flag {flag}")
        return read(self)

    def sequence(self, read: Callable[["Reader"], T]) -> list[T]:
        count = self.u32()
        if count > len(self._data) - self._pos:
            # every element is at least one byte
            raise DecodeError(f"count {count} exceeds remaining input")
        return [read(self) for _ in range(count)]

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes")
