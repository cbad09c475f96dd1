"""Backing-file abstraction with write counters and crash injection.

Two implementations share one small interface: ``DiskStorage`` maps
names to real files in a directory; ``CrashSimStorage`` keeps files in
memory and journals every write so a simulated crash can discard any
subset of the writes issued since the last completed barrier.

Crash model: a barrier makes everything before it durable.  Within the
epoch after the last barrier, each journaled write may survive fully,
survive as a prefix (torn), or vanish, except that writes no larger
than one 512-byte sector are atomic.  Renames are modeled as atomic
metadata operations on an already-synced source file.
"""

from __future__ import annotations

import os
import random

SECTOR = 512  # writes at or below this size never tear


class CrashPoint(Exception):
    """Raised by the simulator when a scheduled crash trigger fires."""


class StorageFile:
    """One named byte file: positional reads/writes plus barriers."""

    def pread(self, offset: int, length: int) -> bytes:
        raise NotImplementedError

    def pwrite(self, offset: int, data: bytes) -> None:
        raise NotImplementedError

    def barrier(self) -> None:
        raise NotImplementedError

    def truncate(self, length: int) -> None:
        raise NotImplementedError

    def size(self) -> int:
        raise NotImplementedError


class Storage:
    """A flat namespace of StorageFiles with shared I/O counters."""

    def __init__(self):
        self.bytes_written = 0
        self.bytes_read = 0
        self.write_ops = 0
        self.barriers = 0

    def open(self, name: str) -> StorageFile:
        raise NotImplementedError

    def exists(self, name: str) -> bool:
        raise NotImplementedError

    def rename(self, src: str, dst: str) -> None:
        raise NotImplementedError

    def delete(self, name: str) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


# ----------------------------------------------------------------------
# real files


class _DiskFile(StorageFile):
    def __init__(self, storage: "DiskStorage", path: str):
        self._storage = storage
        flags = os.O_RDWR | os.O_CREAT
        self._fd = os.open(path, flags, 0o644)

    def pread(self, offset, length):
        self._storage.bytes_read += length
        return os.pread(self._fd, length, offset)

    def pwrite(self, offset, data):
        self._storage.bytes_written += len(data)
        self._storage.write_ops += 1
        os.pwrite(self._fd, data, offset)

    def barrier(self):
        self._storage.barriers += 1
        os.fsync(self._fd)

    def truncate(self, length):
        os.ftruncate(self._fd, length)

    def size(self):
        return os.fstat(self._fd).st_size

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


class DiskStorage(Storage):
    """Files inside one directory on the host file system."""

    def __init__(self, directory: str):
        super().__init__()
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self._open_files: dict[str, _DiskFile] = {}

    def _path(self, name):
        return os.path.join(self.directory, name)

    def open(self, name):
        f = self._open_files.get(name)
        if f is None:
            f = _DiskFile(self, self._path(name))
            self._open_files[name] = f
        return f

    def exists(self, name):
        return os.path.exists(self._path(name))

    def rename(self, src, dst):
        old = self._open_files.pop(dst, None)
        if old is not None:
            old.close()
        moved = self._open_files.pop(src, None)
        os.rename(self._path(src), self._path(dst))
        if moved is not None:
            moved.close()

    def delete(self, name):
        f = self._open_files.pop(name, None)
        if f is not None:
            f.close()
        os.unlink(self._path(name))

    def close(self):
        for f in self._open_files.values():
            f.close()
        self._open_files.clear()


# ----------------------------------------------------------------------
# crash simulation


class _SimFile(StorageFile):
    def __init__(self, storage: "CrashSimStorage", name: str, durable: bytes = b""):
        self._storage = storage
        self.name = name
        self.durable = bytearray(durable)
        self.current = bytearray(durable)
        self.journal: list[tuple] = []  # ("w", off, bytes) | ("t", length)

    def pread(self, offset, length):
        self._storage.bytes_read += length
        end = min(offset + length, len(self.current))
        if offset >= len(self.current):
            return b""
        return bytes(self.current[offset:end])

    def pwrite(self, offset, data):
        self._storage._tick()
        self._storage.bytes_written += len(data)
        self._storage.write_ops += 1
        if offset > len(self.current):
            self.current.extend(bytes(offset - len(self.current)))
        end = offset + len(data)
        if end > len(self.current):
            self.current.extend(bytes(end - len(self.current)))
        self.current[offset:end] = data
        self.journal.append(("w", offset, bytes(data)))

    def barrier(self):
        self._storage.barriers += 1
        self.durable = bytearray(self.current)
        self.journal.clear()

    def truncate(self, length):
        del self.current[length:]
        self.journal.append(("t", length))

    def size(self):
        return len(self.current)


class CrashSimStorage(Storage):
    """In-memory storage whose unflushed writes can be lost on demand.

    ``crash_after`` arms a countdown over write operations across all
    files; when it reaches zero the offending write raises CrashPoint
    without being applied.  ``crash_images`` then produces the surviving
    file contents: everything durable plus a random subset of the
    journaled epoch, honoring sector atomicity and torn tails.
    """

    def __init__(self):
        super().__init__()
        self._files: dict[str, _SimFile] = {}
        self._countdown: int | None = None

    def open(self, name):
        f = self._files.get(name)
        if f is None:
            f = _SimFile(self, name)
            self._files[name] = f
        return f

    def exists(self, name):
        return name in self._files

    def rename(self, src, dst):
        f = self._files.pop(src)
        if f.journal:
            raise AssertionError("rename of a file with unflushed writes")
        f.name = dst
        self._files[dst] = f

    def delete(self, name):
        del self._files[name]

    # -- fault injection ------------------------------------------------

    def arm(self, crash_after: int) -> None:
        """Crash on the ``crash_after``-th future write (1-based)."""
        self._countdown = crash_after

    def disarm(self) -> None:
        self._countdown = None

    def _tick(self):
        if self._countdown is None:
            return
        self._countdown -= 1
        if self._countdown <= 0:
            self._countdown = None
            raise CrashPoint()

    def crash_images(self, rng: random.Random) -> dict[str, bytes]:
        """Surviving content per file after dropping a random subset
        of the unflushed epoch."""
        images = {}
        for name, f in self._files.items():
            buf = bytearray(f.durable)
            for entry in f.journal:
                if entry[0] == "t":
                    if rng.random() < 0.75:
                        del buf[entry[1]:]
                    continue
                _, offset, data = entry
                roll = rng.random()
                if len(data) <= SECTOR:
                    keep = len(data) if roll < 0.8 else 0
                elif roll < 0.6:
                    keep = len(data)
                elif roll < 0.8:
                    keep = rng.randint(1, len(data))
                else:
                    keep = 0
                if keep == 0:
                    continue
                chunk = data[:keep]
                if offset > len(buf):
                    buf.extend(bytes(offset - len(buf)))
                end = offset + len(chunk)
                if end > len(buf):
                    buf.extend(bytes(end - len(buf)))
                buf[offset:end] = chunk
            images[name] = bytes(buf)
        return images

    @classmethod
    def from_images(cls, images: dict[str, bytes]) -> "CrashSimStorage":
        storage = cls()
        for name, data in images.items():
            storage._files[name] = _SimFile(storage, name, data)
        return storage
