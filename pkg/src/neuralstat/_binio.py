"""Little helpers shared by the binary containers."""
from __future__ import annotations

import struct


class FormatError(ValueError):
    """A binary container is malformed: bad magic, unknown version, or truncated payload."""


class Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, field: str) -> bytes:
        if n < 0 or self.remaining < n:
            raise FormatError(
                f"{self.what}: truncated reading {field}: expected {n} bytes, got {max(self.remaining, 0)}")
        out = self.buf[self.pos:self.pos + n].tobytes()
        self.pos += n
        return out

    def u32(self, field: str, endian: str = "<") -> int:
        return struct.unpack(endian + "I", self.take(4, field))[0]

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")
