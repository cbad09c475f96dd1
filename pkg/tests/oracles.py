"""Independent reference models used to check the engine.

The flat byte map stores, for every logical byte, the 64-bit physical
source address (or a hole marker) as raw little-endian bytes.  Range
insertion, removal, and overwrite are then plain bytearray slice
operations, and comparisons against the index are byte-for-byte.
"""

from __future__ import annotations

import numpy as np

from flexstore.flextree import UNMAPPED

HOLE64 = (1 << 64) - 1


def source_bytes(phys: int, length: int) -> bytes:
    """Per-byte source encoding for a run (holes do not advance)."""
    if phys == UNMAPPED:
        return np.full(length, HOLE64, dtype="<u8").tobytes()
    return np.arange(phys, phys + length, dtype="<u8").tobytes()


def expand_runs(runs) -> bytes:
    """Encode a run list the same way the byte map stores sources."""
    return b"".join(source_bytes(p, n) for p, n in runs)


class ByteMapOracle:
    """Flat per-byte model of an extent index."""

    def __init__(self):
        self.buf = bytearray()

    @property
    def size(self) -> int:
        return len(self.buf) // 8

    def insert(self, offset: int, length: int, phys: int) -> None:
        self.buf[offset * 8:offset * 8] = source_bytes(phys, length)

    def collapse(self, offset: int, length: int) -> bytes:
        lo, hi = offset * 8, (offset + length) * 8
        removed = bytes(self.buf[lo:hi])
        del self.buf[lo:hi]
        return removed

    def write(self, offset: int, length: int, phys: int) -> None:
        if offset > self.size:
            self.buf.extend(source_bytes(UNMAPPED, offset - self.size))
        end = offset + length
        if end > self.size:
            self.buf.extend(bytes((end - self.size) * 8))
        self.buf[offset * 8:end * 8] = source_bytes(phys, length)

    def slice(self, offset: int, length: int) -> bytes:
        return bytes(self.buf[offset * 8:(offset + length) * 8])

    def source_at(self, offset: int) -> int:
        return int.from_bytes(self.buf[offset * 8:offset * 8 + 8], "little")


class ByteContentOracle:
    """Plain byte-string model of a space's logical content."""

    def __init__(self):
        self.buf = bytearray()

    @property
    def size(self) -> int:
        return len(self.buf)

    def insert(self, offset: int, data: bytes) -> None:
        self.buf[offset:offset] = data

    def collapse(self, offset: int, length: int) -> None:
        del self.buf[offset:offset + length]

    def write(self, offset: int, data: bytes) -> None:
        if offset > len(self.buf):
            self.buf.extend(bytes(offset - len(self.buf)))
        end = offset + len(data)
        if end > len(self.buf):
            self.buf.extend(bytes(end - len(self.buf)))
        self.buf[offset:end] = data

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self.buf[offset:offset + length])
