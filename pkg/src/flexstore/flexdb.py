"""Sorted key-value store kept entirely inside one flexible space.

All persistent records live in a single FlexSpace, always sorted by key
(bytewise).  Each record is varint(key length), varint(value length),
key bytes, value bytes.  Because the space supports byte-granular
in-place insertion and removal, committing an update is a local edit at
the record's sorted position: no multi-level compaction and no
persistent tombstones (a delete collapses the record's bytes).

A volatile sparse index groups the records into intervals and maps each
interval's smallest key to its byte offset.  The index is a B+-tree
keyed by interval keys whose child pointers carry shift values: when a
commit grows or shrinks an interval, the intervals behind it move by
updating O(log n) shifts instead of every stored offset.

Writes land in a WAL plus an in-memory table first; a committer drains
the immutable table into the space in key order, yielding its lock
every 1000 records so readers stay responsive.  Reads check the tables,
then search the sparse index and probe a cached interval through 16-bit
key fingerprints.  The interval cache is CLOCK-managed, write-through.

On restart the WAL suffix repopulates the table and the sparse index is
rebuilt by sampling one record key per stride with ``read_extent``;
every extent starts at a record boundary, so each probe lands on a
decodable key without scanning the whole store.
"""

from __future__ import annotations

import json
import struct
import threading
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field
from zlib import crc32

from .errors import (
    CorruptionError,
    OutOfRangeError,
    StoreClosedError,
    UnrecoverableStoreError,
)
from .flexspace import FlexSpace, SpaceConfig
from .locks import ReadWriteLock
from .storage import DiskStorage, Storage, StorageFile

TOMBSTONE = object()

WAL_MAGIC = b"FXWL"
WAL_HEADER_SIZE = 16
WAL_PUT = 1
WAL_DELETE = 2
WAL_ROTATE = 3
WAL_COMMIT = 4

_U32 = struct.Struct("<I")


def encode_varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def decode_varint(buf, pos: int) -> tuple[int, int]:
    val = 0
    shift = 0
    while True:
        b = buf[pos]
        pos += 1
        val |= (b & 0x7F) << shift
        if not b & 0x80:
            return val, pos
        shift += 7
        if shift > 63:
            raise CorruptionError("varint overruns 64 bits")


def encode_record(key: bytes, value: bytes) -> bytes:
    return encode_varint(len(key)) + encode_varint(len(value)) + key + value


def decode_record(buf, pos: int) -> tuple[bytes, bytes, int]:
    klen, pos = decode_varint(buf, pos)
    vlen, pos = decode_varint(buf, pos)
    key = bytes(buf[pos:pos + klen])
    value = bytes(buf[pos + klen:pos + klen + vlen])
    if len(key) != klen or len(value) != vlen:
        raise CorruptionError("record truncated")
    return key, value, pos + klen + vlen


def fingerprint(key: bytes) -> int:
    return crc32(key) & 0xFFFF


# ----------------------------------------------------------------------
# MemTable


class MemTable:
    """Ordered write buffer: key -> value or TOMBSTONE.

    One mutator at a time (callers serialize); readers are safe against
    the GIL-atomic dict/list operations used here.
    """

    __slots__ = ("_map", "_keys", "approx_bytes", "immutable")

    def __init__(self):
        self._map: dict[bytes, object] = {}
        self._keys: list[bytes] = []
        self.approx_bytes = 0
        self.immutable = False

    def __len__(self):
        return len(self._keys)

    def put(self, key: bytes, value) -> None:
        if self.immutable:
            raise AssertionError("write to an immutable MemTable")
        prev = self._map.get(key)
        if prev is None:
            insort(self._keys, key)
            self.approx_bytes += len(key) + 16
        elif prev is not TOMBSTONE:
            self.approx_bytes -= len(prev)
        self._map[key] = value
        if value is not TOMBSTONE:
            self.approx_bytes += len(value)

    def get(self, key: bytes):
        """Value, TOMBSTONE, or None when the key is absent."""
        return self._map.get(key)

    def items(self):
        m = self._map
        return [(k, m[k]) for k in self._keys]

    def next_above(self, key: bytes):
        """Smallest (k, v) with k > key, else None."""
        i = bisect_right(self._keys, key)
        if i < len(self._keys):
            k = self._keys[i]
            return k, self._map[k]
        return None


# ----------------------------------------------------------------------
# write-ahead log


class WriteAheadLog:
    """Length+CRC framed records with rotation and commit markers."""

    def __init__(self, f: StorageFile):
        self._f = f
        self._tail = 0
        self._buf: list[bytes] = []

    def initialize(self, base_gen: int) -> None:
        body = WAL_MAGIC + bytes([1]) + b"\x00\x00\x00" + struct.pack("<Q", base_gen)
        self._f.pwrite(0, body)
        self._f.barrier()
        self._f.truncate(WAL_HEADER_SIZE)
        self._tail = WAL_HEADER_SIZE
        self._buf = []

    @staticmethod
    def _frame(payload: bytes) -> bytes:
        return _U32.pack(len(payload)) + _U32.pack(crc32(payload)) + payload

    def append(self, op: int, key: bytes = b"", value: bytes = b"", gen: int = 0) -> None:
        if op == WAL_PUT:
            payload = bytes([op]) + encode_varint(len(key)) + key + \
                encode_varint(len(value)) + value
        elif op == WAL_DELETE:
            payload = bytes([op]) + encode_varint(len(key)) + key
        else:
            payload = bytes([op]) + encode_varint(gen)
        self._buf.append(self._frame(payload))

    def flush(self) -> None:
        if not self._buf:
            return
        blob = b"".join(self._buf)
        self._f.pwrite(self._tail, blob)
        self._tail += len(blob)
        self._f.barrier()
        self._buf = []

    def replay(self) -> tuple[int, list[tuple]]:
        """Returns (base_gen, [(gen, op, key, value), ...]) for records
        past the last commit marker; torn tails are dropped."""
        size = self._f.size()
        if size < WAL_HEADER_SIZE:
            self.initialize(0)
            return 0, []
        head = self._f.pread(0, WAL_HEADER_SIZE)
        if head[:4] != WAL_MAGIC:
            raise UnrecoverableStoreError("bad WAL magic")
        (base_gen,) = struct.unpack_from("<Q", head, 8)
        pos = WAL_HEADER_SIZE
        gen = base_gen
        records: list[tuple] = []
        committed_through = base_gen - 1
        while pos + 8 <= size:
            hdr = self._f.pread(pos, 8)
            ln, crc = struct.unpack("<II", hdr)
            if ln == 0 or pos + 8 + ln > size:
                break
            payload = self._f.pread(pos + 8, ln)
            if crc32(payload) != crc:
                break
            op = payload[0]
            if op == WAL_PUT:
                klen, p = decode_varint(payload, 1)
                key = payload[p:p + klen]
                vlen, p2 = decode_varint(payload, p + klen)
                value = payload[p2:p2 + vlen]
                records.append((gen, op, bytes(key), bytes(value)))
            elif op == WAL_DELETE:
                klen, p = decode_varint(payload, 1)
                records.append((gen, op, bytes(payload[p:p + klen]), b""))
            elif op == WAL_ROTATE:
                g, _ = decode_varint(payload, 1)
                gen = g + 1
            elif op == WAL_COMMIT:
                g, _ = decode_varint(payload, 1)
                committed_through = max(committed_through, g)
            else:
                break
            pos += 8 + ln
        self._tail = pos
        self._f.truncate(pos)
        live = [r for r in records if r[0] > committed_through]
        return gen, live


# ----------------------------------------------------------------------
# sparse interval index


class IntervalEntry:
    """One interval of consecutive sorted records in the space."""

    __slots__ = ("ikey", "poff", "size", "count", "cache", "fragmented")

    def __init__(self, ikey, poff, size, count):
        self.ikey = ikey          # None only for the store's first interval
        self.poff = poff
        self.size = size
        self.count = count        # -1 until first load after recovery
        self.cache = None
        self.fragmented = False


class _IxLeaf:
    __slots__ = ("entries",)

    def __init__(self, entries=None):
        self.entries: list[IntervalEntry] = entries if entries is not None else []


class _IxInner:
    __slots__ = ("keys", "shifts", "children")

    def __init__(self, keys, shifts, children):
        self.keys = keys
        self.shifts = shifts
        self.children = children


class SparseIndex:
    """B+-tree over interval keys with shift-encoded byte offsets.

    Interval offsets are leaf values (partial offset plus the shifts on
    the path), never search keys, so shifting the tail of the store
    touches no pivot keys.
    """

    def __init__(self, fanout: int = 32):
        if fanout < 4:
            raise ValueError("fanout too small")
        self._fanout = fanout
        self.root = _IxLeaf()
        self.count = 0

    def is_empty(self) -> bool:
        return self.count == 0

    @staticmethod
    def _k(entry_key):
        return b"" if entry_key is None else entry_key

    def find(self, key: bytes):
        """Locate the interval owning ``key``.

        Returns (leaf, idx, path, eff) where path is [(inner, child_i)]
        and eff is the interval's effective byte offset; None if empty.
        """
        if self.count == 0:
            return None
        node = self.root
        acc = 0
        path = []
        while isinstance(node, _IxInner):
            i = bisect_right(node.keys, key)
            path.append((node, i))
            acc += node.shifts[i]
            node = node.children[i]
        ks = [self._k(e.ikey) for e in node.entries]
        idx = bisect_right(ks, key) - 1
        if idx < 0:
            idx = 0  # keys below the first interval land in it
        return node, idx, path, acc + node.entries[idx].poff

    def successor(self, leaf, idx, path):
        """Entry after (leaf, idx): (leaf2, idx2, path2, entry) or None."""
        if idx + 1 < len(leaf.entries):
            return leaf, idx + 1, list(path), leaf.entries[idx + 1]
        for depth in range(len(path) - 1, -1, -1):
            inner, ci = path[depth]
            if ci + 1 < len(inner.children):
                path2 = list(path[:depth]) + [(inner, ci + 1)]
                node = inner.children[ci + 1]
                while isinstance(node, _IxInner):
                    path2.append((node, 0))
                    node = node.children[0]
                return node, 0, path2, node.entries[0]
        return None

    def shift_after(self, leaf, idx, path, delta: int) -> None:
        """Move every interval behind (leaf, idx) by ``delta`` bytes."""
        if delta == 0:
            return
        entries = leaf.entries
        for j in range(idx + 1, len(entries)):
            entries[j].poff += delta
        for inner, ci in path:
            shifts = inner.shifts
            for j in range(ci + 1, len(shifts)):
                shifts[j] += delta

    def insert_first(self, entry: IntervalEntry) -> None:
        assert self.count == 0
        self.root = _IxLeaf([entry])
        self.count = 1

    def insert_entry(self, entry: IntervalEntry, eff: int) -> None:
        """Insert an interval whose effective offset is ``eff``."""
        key = self._k(entry.ikey)
        limit = self._fanout - 1
        if self._node_size(self.root) >= limit:
            root = self.root
            self.root = _IxInner([], [0], [root])
            self._split_child(self.root, 0)
        node = self.root
        acc = 0
        while isinstance(node, _IxInner):
            i = bisect_right(node.keys, key)
            if self._node_size(node.children[i]) >= limit:
                self._split_child(node, i)
                i = bisect_right(node.keys, key)
            acc += node.shifts[i]
            node = node.children[i]
        ks = [self._k(e.ikey) for e in node.entries]
        pos = bisect_right(ks, key)
        entry.poff = eff - acc
        node.entries.insert(pos, entry)
        self.count += 1

    def remove_entry(self, leaf, idx, path) -> None:
        del leaf.entries[idx]
        self.count -= 1
        node = leaf
        merge_cap = self._fanout // 2
        for parent, ci in reversed(path):
            size = self._node_size(node)
            if size == 0:
                del parent.children[ci]
                del parent.shifts[ci]
                if parent.keys:
                    del parent.keys[ci - 1 if ci > 0 else 0]
            else:
                if ci > 0 and size + self._node_size(parent.children[ci - 1]) <= merge_cap:
                    self._merge_children(parent, ci - 1)
                elif ci + 1 < len(parent.children) and \
                        size + self._node_size(parent.children[ci + 1]) <= merge_cap:
                    self._merge_children(parent, ci)
            node = parent
        root = self.root
        while isinstance(root, _IxInner):
            if len(root.children) == 0:
                root = _IxLeaf()
                break
            if len(root.children) > 1:
                break
            s = root.shifts[0]
            child = root.children[0]
            if s != 0:
                if isinstance(child, _IxInner):
                    child.shifts = [x + s for x in child.shifts]
                else:
                    for e in child.entries:
                        e.poff += s
            root = child
        self.root = root

    def _node_size(self, node) -> int:
        if isinstance(node, _IxInner):
            return len(node.children)
        return len(node.entries)

    def _split_child(self, parent, i) -> None:
        child = parent.children[i]
        s = parent.shifts[i]
        if isinstance(child, _IxInner):
            m = len(child.children) // 2
            up_key = child.keys[m - 1]
            right = _IxInner(child.keys[m:], child.shifts[m:], child.children[m:])
            del child.keys[m - 1:]
            del child.shifts[m:]
            del child.children[m:]
        else:
            m = len(child.entries) // 2
            up_key = self._k(child.entries[m].ikey)
            right = _IxLeaf(child.entries[m:])
            del child.entries[m:]
        parent.children.insert(i + 1, right)
        parent.shifts.insert(i + 1, s)
        parent.keys.insert(i, up_key)

    def _merge_children(self, parent, li) -> None:
        ri = li + 1
        left = parent.children[li]
        right = parent.children[ri]
        d = parent.shifts[ri] - parent.shifts[li]
        if isinstance(left, _IxInner):
            left.keys.extend([parent.keys[ri - 1]] + right.keys)
            left.shifts.extend(x + d for x in right.shifts)
            left.children.extend(right.children)
        else:
            for e in right.entries:
                e.poff += d
            left.entries.extend(right.entries)
        del parent.children[ri]
        del parent.shifts[ri]
        del parent.keys[ri - 1]

    def walk(self):
        """Yield (entry, eff) for every interval in key order."""
        out = []

        def rec(node, acc):
            if isinstance(node, _IxInner):
                for i, child in enumerate(node.children):
                    rec(child, acc + node.shifts[i])
            else:
                for e in node.entries:
                    out.append((e, acc + e.poff))

        rec(self.root, 0)
        return out

    def check(self, expected_total: int | None = None) -> None:
        seq = self.walk()
        pos = 0
        prev_key = None
        for n, (e, eff) in enumerate(seq):
            assert eff == pos, f"interval {n} at {eff}, expected {pos}"
            assert e.size >= 0
            if n == 0:
                pass
            else:
                assert e.ikey is not None, "non-first interval without a key"
                if prev_key is not None:
                    assert self._k(e.ikey) > prev_key, "interval keys out of order"
            prev_key = self._k(e.ikey)
            pos += e.size
        if expected_total is not None:
            assert pos == expected_total, f"intervals tile {pos} != {expected_total}"


# ----------------------------------------------------------------------
# interval cache


class CachedInterval:
    """Decoded interval: sorted keys, values, fingerprints, offsets."""

    __slots__ = ("keys", "values", "fps", "offs", "ref")

    def __init__(self, keys, values, fps, offs):
        self.keys = keys
        self.values = values
        self.fps = fps
        self.offs = offs  # record start offsets; offs[-1] == interval size
        self.ref = True

    @classmethod
    def decode(cls, data: bytes) -> "CachedInterval":
        keys, values, fps, offs = [], [], [], [0]
        pos = 0
        while pos < len(data):
            key, value, pos = decode_record(data, pos)
            keys.append(key)
            values.append(value)
            fps.append(fingerprint(key))
            offs.append(pos)
        return cls(keys, values, fps, offs)

    def lookup(self, key: bytes):
        """Fingerprint-filtered point probe; index or None."""
        fp = fingerprint(key)
        fps = self.fps
        for i, f in enumerate(fps):
            if f == fp and self.keys[i] == key:
                return i
        return None

    def record_size(self, i: int) -> int:
        return self.offs[i + 1] - self.offs[i]

    def insert(self, i: int, key: bytes, value: bytes, size: int) -> None:
        self.keys.insert(i, key)
        self.values.insert(i, value)
        self.fps.insert(i, fingerprint(key))
        self.offs.insert(i + 1, self.offs[i])
        for j in range(i + 1, len(self.offs)):
            self.offs[j] += size

    def remove(self, i: int) -> None:
        size = self.record_size(i)
        del self.keys[i]
        del self.values[i]
        del self.fps[i]
        del self.offs[i + 1]
        for j in range(i + 1, len(self.offs)):
            self.offs[j] -= size

    def replace_value(self, i: int, value: bytes, new_size: int) -> None:
        delta = new_size - self.record_size(i)
        self.values[i] = value
        if delta:
            for j in range(i + 1, len(self.offs)):
                self.offs[j] += delta


class IntervalCache:
    """CLOCK replacement over cached intervals, write-through."""

    def __init__(self, capacity: int):
        self.capacity = max(1, capacity)
        self._ring: list[IntervalEntry] = []
        self._hand = 0
        self.hits = 0
        self.misses = 0

    def admit(self, entry: IntervalEntry, ci: CachedInterval) -> None:
        if entry.cache is not None:
            return
        while len(self._ring) >= self.capacity:
            victim = self._ring[self._hand]
            if victim.cache is None:
                self._ring.pop(self._hand)
            elif victim.cache.ref:
                victim.cache.ref = False
                self._hand += 1
            else:
                victim.cache = None
                self._ring.pop(self._hand)
            if self._ring and self._hand >= len(self._ring):
                self._hand = 0
        entry.cache = ci
        self._ring.append(entry)

    def drop(self, entry: IntervalEntry) -> None:
        entry.cache = None

    def __len__(self):
        return sum(1 for e in self._ring if e.cache is not None)


# ----------------------------------------------------------------------
# the store


@dataclass
class DBConfig:
    memtable_cap: int = 8 << 20
    interval_split_bytes: int = 16 << 10
    interval_split_count: int = 16
    cache_capacity: int = 1024
    recovery_stride: int = 16 << 10
    index_fanout: int = 32
    wal_sync_every_op: bool = False
    background_commit: bool = False
    space: SpaceConfig = field(default_factory=SpaceConfig)


MANIFEST_NAME = "manifest"
MANIFEST_FIELDS = ("memtable_cap", "interval_split_bytes", "interval_split_count",
                   "cache_capacity", "recovery_stride", "index_fanout",
                   "wal_sync_every_op")


class FlexDB:
    """Sorted KV store over one FlexSpace."""

    def __init__(self, storage: Storage, config: DBConfig, *, _create: bool):
        self.storage = storage
        self.config = config
        self.lock = ReadWriteLock()      # sparse index + space vs committer
        self._write_mu = threading.Lock()
        self._imm_drained = threading.Condition(self._write_mu)
        self._closed = False
        self.index = SparseIndex(config.index_fanout)
        self.cache = IntervalCache(config.cache_capacity)
        self._cache_mu = threading.Lock()
        self.mut = MemTable()
        self.imm: MemTable | None = None
        self._gen = 0
        self.recovery_probes = 0
        self._committer: threading.Thread | None = None
        self._committer_wake = threading.Condition()
        if _create:
            self.space = FlexSpace.create(storage=storage, config=config.space)
            self.wal = WriteAheadLog(storage.open("wal"))
            self.wal.initialize(0)
            self._write_manifest()
        else:
            self._load_manifest()
            self.space = FlexSpace.open(storage=storage)
            self.wal = WriteAheadLog(storage.open("wal"))
            self._recover()
        if config.background_commit:
            self._committer = threading.Thread(
                target=self._committer_loop, name="flexdb-committer", daemon=True)
            self._committer.start()

    # -- lifecycle ------------------------------------------------------

    @classmethod
    def create(cls, directory: str | None = None, config: DBConfig | None = None,
               storage: Storage | None = None) -> "FlexDB":
        storage = storage or DiskStorage(directory)
        if storage.exists(MANIFEST_NAME):
            raise ValueError("store already exists")
        return cls(storage, config or DBConfig(), _create=True)

    @classmethod
    def open(cls, directory: str | None = None, config: DBConfig | None = None,
             storage: Storage | None = None) -> "FlexDB":
        storage = storage or DiskStorage(directory)
        if not storage.exists(MANIFEST_NAME):
            raise UnrecoverableStoreError("no manifest in store directory")
        return cls(storage, config or DBConfig(), _create=False)

    @classmethod
    def open_or_create(cls, directory: str | None = None,
                       config: DBConfig | None = None,
                       storage: Storage | None = None) -> "FlexDB":
        storage = storage or DiskStorage(directory)
        if storage.exists(MANIFEST_NAME):
            return cls.open(config=config, storage=storage)
        return cls.create(config=config, storage=storage)

    def close(self) -> None:
        if self._closed:
            return
        self.flush()
        self._closed = True
        if self._committer is not None:
            with self._committer_wake:
                self._committer_wake.notify_all()
            self._committer.join(timeout=10)
        self.space.close()

    def _write_manifest(self):
        doc = {"format": 1, "comparator": "bytewise"}
        for name in MANIFEST_FIELDS:
            doc[name] = getattr(self.config, name)
        blob = json.dumps(doc, sort_keys=True).encode()
        f = self.storage.open(MANIFEST_NAME)
        f.pwrite(0, blob)
        f.truncate(len(blob))
        f.barrier()

    def _load_manifest(self):
        f = self.storage.open(MANIFEST_NAME)
        doc = json.loads(f.pread(0, f.size()).decode())
        if doc.get("format") != 1 or doc.get("comparator") != "bytewise":
            raise UnrecoverableStoreError("unsupported manifest")
        for name in MANIFEST_FIELDS:
            if name in doc:
                setattr(self.config, name, doc[name])

    # -- client API -------------------------------------------------------

    def put(self, key: bytes, value: bytes) -> None:
        if not key:
            raise ValueError("empty key")
        self._apply(key, bytes(value))

    def delete(self, key: bytes) -> None:
        if not key:
            raise ValueError("empty key")
        self._apply(key, TOMBSTONE)

    def _apply(self, key: bytes, value) -> None:
        if self._closed:
            raise StoreClosedError("store is closed")
        with self._write_mu:
            if value is TOMBSTONE:
                self.wal.append(WAL_DELETE, key)
            else:
                self.wal.append(WAL_PUT, key, value)
            if self.config.wal_sync_every_op:
                self.wal.flush()
            self.mut.put(key, value)
            if self.mut.approx_bytes >= self.config.memtable_cap:
                self._rotate_locked()

    def get(self, key: bytes):
        """The value, or None when the key is absent."""
        if self._closed:
            raise StoreClosedError("store is closed")
        v = self.mut.get(key)
        if v is None and self.imm is not None:
            v = self.imm.get(key)
        if v is TOMBSTONE:
            return None
        if v is not None:
            return v
        with self.lock.read_locked():
            return self._space_get(key)

    def scan(self, start_key: bytes, limit: int | None = None):
        """Iterate (key, value) pairs with key >= start_key, ascending."""
        if self._closed:
            raise StoreClosedError("store is closed")
        emitted = 0
        # Half-open cursor: strictly-greater stepping from prev.
        prev = None
        while limit is None or emitted < limit:
            nxt = self._next_pair(start_key if prev is None else prev,
                                  inclusive=prev is None)
            if nxt is None:
                return
            key, value = nxt
            prev = key
            if value is TOMBSTONE:
                continue
            yield key, value
            emitted += 1

    seek = scan

    def flush(self) -> None:
        """Force-commit everything buffered, then fence the space."""
        if self._closed:
            raise StoreClosedError("store is closed")
        with self._write_mu:
            if len(self.mut) > 0:
                self._rotate_locked()
            while self.imm is not None and self._committer is not None:
                self._imm_drained.wait(timeout=10)
        self.space.barrier()

    def stats(self) -> dict:
        return {
            "intervals": self.index.count,
            "cache_capacity": self.cache.capacity,
            "cache_hits": self.cache.hits,
            "cache_misses": self.cache.misses,
            "cache_hit_rate": (self.cache.hits /
                               max(1, self.cache.hits + self.cache.misses)),
            "memtable_keys": len(self.mut),
            "immutable_pending": self.imm is not None,
            "recovery_probes": self.recovery_probes,
            "space": self.space.stats(),
        }

    # -- memtable rotation / committer ------------------------------------

    def _rotate_locked(self):
        while self.imm is not None:
            if self._committer is None:
                self._commit_immutable(write_mu_held=True)
            else:
                self._imm_drained.wait(timeout=10)
        self.mut.immutable = True
        self.imm = self.mut
        self.mut = MemTable()
        self.wal.append(WAL_ROTATE, gen=self._gen)
        self.wal.flush()
        self._gen += 1
        if self._committer is not None:
            with self._committer_wake:
                self._committer_wake.notify_all()
        else:
            self._commit_immutable(write_mu_held=True)

    def _committer_loop(self):
        while not self._closed:
            with self._committer_wake:
                if self.imm is None:
                    self._committer_wake.wait(timeout=0.05)
            if self.imm is not None and not self._closed:
                self._commit_immutable()

    def _commit_immutable(self, write_mu_held: bool = False):
        imm = self.imm
        if imm is None:
            return
        items = imm.items()
        done = 0
        self.lock.acquire_write()
        try:
            for key, value in items:
                self._commit_one(key, value)
                done += 1
                if done % 1000 == 0:
                    # Yield so readers are not starved by a long batch.
                    self.lock.release_write()
                    self.lock.acquire_write()
            self.space.barrier()
        finally:
            self.lock.release_write()
        if write_mu_held:
            self._finish_commit_locked()
        else:
            with self._write_mu:
                self._finish_commit_locked()

    def _finish_commit_locked(self):
        self.wal.append(WAL_COMMIT, gen=self._gen - 1)
        self.wal.flush()
        self._compact_wal_locked()
        self.imm = None
        self._imm_drained.notify_all()

    def _compact_wal_locked(self):
        # Rewrite the WAL with only the live (uncommitted) records: the
        # mutable table's contents.  Temp file is fenced before rename.
        tmp = self.storage.open("wal.tmp")
        w = WriteAheadLog(tmp)
        w.initialize(self._gen)
        for key, value in self.mut.items():
            if value is TOMBSTONE:
                w.append(WAL_DELETE, key)
            else:
                w.append(WAL_PUT, key, value)
        w.flush()
        tmp.barrier()
        tail = tmp.size()
        self.storage.rename("wal.tmp", "wal")
        self.wal = WriteAheadLog(self.storage.open("wal"))
        self.wal._tail = tail

    # -- committing one record ---------------------------------------------

    def _commit_one(self, key: bytes, value) -> None:
        while True:
            found = self.index.find(key)
            if found is None:
                if value is TOMBSTONE:
                    return
                first = IntervalEntry(None, 0, 0, 0)
                self.index.insert_first(first)
                with self._cache_mu:
                    self.cache.admit(first, CachedInterval([], [], [], [0]))
                continue
            leaf, idx, path, eff = found
            entry = leaf.entries[idx]
            ci = self._ensure_loaded(entry, eff)
            if self._split_oversized(entry, eff):
                continue  # structure changed; relocate the key
            break
        if entry.fragmented and entry.size > 0:
            self.space.defrag(eff, entry.size)
            entry.fragmented = False
        pos = bisect_left(ci.keys, key)
        present = pos < len(ci.keys) and ci.keys[pos] == key
        if value is TOMBSTONE:
            if not present:
                return
            old = ci.record_size(pos)
            self.space.collapse_range(eff + ci.offs[pos], old)
            ci.remove(pos)
            entry.count -= 1
            entry.size -= old
            self.index.shift_after(leaf, idx, path, -old)
            if entry.count == 0:
                with self._cache_mu:
                    self.cache.drop(entry)
                self.index.remove_entry(leaf, idx, path)
                return
            if pos == 0 and entry.ikey is not None:
                entry.ikey = ci.keys[0]
            self._maybe_merge(key)
            return
        rec = encode_record(key, value)
        if present:
            old = ci.record_size(pos)
            if len(rec) == old:
                # Same-sized record: overwrite in place, nothing shifts.
                self.space.pwrite(eff + ci.offs[pos], rec)
                ci.values[pos] = value
                return
            self.space.collapse_range(eff + ci.offs[pos], old)
            self.space.insert_range(eff + ci.offs[pos], rec)
            delta = len(rec) - old
            ci.values[pos] = value
            for j in range(pos + 1, len(ci.offs)):
                ci.offs[j] += delta
            entry.size += delta
            self.index.shift_after(leaf, idx, path, delta)
        else:
            self.space.insert_range(eff + ci.offs[pos], rec)
            ci.insert(pos, key, value, len(rec))
            entry.count += 1
            entry.size += len(rec)
            if pos == 0 and entry.ikey is not None:
                entry.ikey = key
            self.index.shift_after(leaf, idx, path, len(rec))
        self._split_oversized_by_key(key)

    def _ensure_loaded(self, entry: IntervalEntry, eff: int) -> CachedInterval:
        with self._cache_mu:
            if entry.cache is not None:
                self.cache.hits += 1
                entry.cache.ref = True
                return entry.cache
            self.cache.misses += 1
        data = self.space.pread(eff, entry.size)
        ci = CachedInterval.decode(data)
        if entry.count == -1:
            entry.count = len(ci.keys)
        elif entry.count != len(ci.keys):
            raise CorruptionError(
                f"interval claims {entry.count} records, decoded {len(ci.keys)}")
        if entry.size > 0:
            runs = len(self.space.tree.query_range(eff, entry.size))
            entry.fragmented = runs * 2 > max(1, len(ci.keys))
        with self._cache_mu:
            if entry.cache is None:
                self.cache.admit(entry, ci)
            else:
                ci = entry.cache
        return ci

    def _split_oversized(self, entry: IntervalEntry, eff: int) -> bool:
        cfg = self.config
        if entry.count < 2:
            return False
        if entry.size <= cfg.interval_split_bytes and \
                entry.count <= cfg.interval_split_count:
            return False
        ci = entry.cache
        h = entry.count // 2
        cut = ci.offs[h]
        right = IntervalEntry(ci.keys[h], 0, entry.size - cut, entry.count - h)
        right.fragmented = entry.fragmented
        right_ci = CachedInterval(
            ci.keys[h:], ci.values[h:], ci.fps[h:],
            [o - cut for o in ci.offs[h:]])
        del ci.keys[h:]
        del ci.values[h:]
        del ci.fps[h:]
        del ci.offs[h + 1:]
        entry.size = cut
        entry.count = h
        self.index.insert_entry(right, eff + cut)
        with self._cache_mu:
            self.cache.admit(right, right_ci)
        return True

    def _split_oversized_by_key(self, key: bytes) -> None:
        while True:
            found = self.index.find(key)
            if found is None:
                return
            leaf, idx, path, eff = found
            entry = leaf.entries[idx]
            if entry.cache is None:
                return
            if not self._split_oversized(entry, eff):
                return

    def _maybe_merge(self, key: bytes) -> None:
        cfg = self.config
        found = self.index.find(key)
        if found is None:
            return
        leaf, idx, path, eff = found
        entry = leaf.entries[idx]
        if entry.size >= cfg.interval_split_bytes or \
                entry.count >= cfg.interval_split_count or entry.count < 0:
            return
        nxt = self.index.successor(leaf, idx, path)
        if nxt is None:
            return
        leaf2, idx2, path2, succ = nxt
        if succ.count == -1:
            self._ensure_loaded(succ, eff + entry.size)
        if entry.size + succ.size >= cfg.interval_split_bytes:
            return
        if entry.count + succ.count >= cfg.interval_split_count:
            return
        # Merge: adjacent byte ranges fuse, offsets of later intervals
        # do not move.
        with self._cache_mu:
            if entry.cache is not None and succ.cache is not None:
                left, right = entry.cache, succ.cache
                base = entry.size
                left.keys.extend(right.keys)
                left.values.extend(right.values)
                left.fps.extend(right.fps)
                left.offs.extend(base + o for o in right.offs[1:])
            else:
                self.cache.drop(entry)
            self.cache.drop(succ)
        entry.size += succ.size
        entry.count += succ.count
        self.index.remove_entry(leaf2, idx2, path2)

    # -- read path ----------------------------------------------------------

    def _space_get(self, key: bytes):
        found = self.index.find(key)
        if found is None:
            return None
        leaf, idx, path, eff = found
        entry = leaf.entries[idx]
        ci = self._ensure_loaded(entry, eff)
        i = ci.lookup(key)
        return None if i is None else ci.values[i]

    def _space_next(self, key: bytes, inclusive: bool):
        found = self.index.find(key)
        if found is None:
            return None
        leaf, idx, path, eff = found
        entry = leaf.entries[idx]
        ci = self._ensure_loaded(entry, eff)
        pos = bisect_left(ci.keys, key) if inclusive else bisect_right(ci.keys, key)
        if pos < len(ci.keys):
            return ci.keys[pos], ci.values[pos]
        nxt = self.index.successor(leaf, idx, path)
        if nxt is None:
            return None
        _, _, _, succ = nxt
        sci = self._ensure_loaded(succ, eff + entry.size)
        if not sci.keys:
            return None
        return sci.keys[0], sci.values[0]

    def _next_pair(self, key: bytes, inclusive: bool):
        """Merged successor over memtables and the space; value may be
        TOMBSTONE (caller skips it)."""
        best = None

        def consider(pair):
            nonlocal best
            if pair is None:
                return
            if best is None or pair[0] < best[0]:
                best = pair

        # Order matters: consider() keeps the earlier source on a key
        # tie, so the mutable table shadows the immutable one, and both
        # shadow the space.
        mt = self.mut
        if inclusive:
            v = mt.get(key)
            if v is not None:
                consider((key, v))
        consider(mt.next_above(key))
        imm = self.imm
        if imm is not None:
            if inclusive:
                v = imm.get(key)
                if v is not None:
                    consider((key, v))
            consider(imm.next_above(key))
        with self.lock.read_locked():
            sp = self._space_next(key, inclusive)
        consider(sp)
        return best

    # -- recovery -------------------------------------------------------------

    def _recover(self):
        final_gen, live = self.wal.replay()
        self._gen = final_gen
        self.mut = MemTable()
        for gen, op, key, value in live:
            self.mut.put(key, value if op == WAL_PUT else TOMBSTONE)
        self._rebuild_index()
        with self._write_mu:
            self._compact_wal_locked()

    def _rebuild_index(self):
        self.index = SparseIndex(self.config.index_fanout)
        self.recovery_probes = 0
        size = self.space.size
        if size == 0:
            return
        stride = self.config.recovery_stride
        boundaries = [0]
        probe = stride
        while probe < size:
            self.recovery_probes += 1
            start, _, _ = self.space.read_extent(probe, 1)
            if start > boundaries[-1]:
                boundaries.append(start)
            probe += stride
        boundaries.append(size)
        first = True
        for b, nxt in zip(boundaries, boundaries[1:]):
            if nxt <= b:
                continue
            if first:
                ikey = None
                first = False
            else:
                ikey = self._key_at(b)
            entry = IntervalEntry(ikey, b, nxt - b, -1)
            if self.index.is_empty():
                self.index.insert_first(entry)
            else:
                self.index.insert_entry(entry, b)

    def _key_at(self, offset: int) -> bytes:
        start, data, nread = self.space.read_extent(offset, 512)
        assert start == offset, "recovery probe not on an extent start"
        buf = bytearray(data)
        want = 512
        while True:
            try:
                klen, p = decode_varint(buf, 0)
                _, p = decode_varint(buf, p)
                if len(buf) >= p + klen:
                    return bytes(buf[p:p + klen])
            except (IndexError, CorruptionError):
                pass
            avail = self.space.size - offset - len(buf)
            if avail <= 0:
                raise CorruptionError("cannot decode a record key at rebuild")
            buf.extend(self.space.pread(offset + len(buf), min(want, avail)))
            want *= 2

    # -- verification helpers (test support) -----------------------------------

    def check_intervals(self) -> None:
        """Index/space synchrony: sizes tile, counts and keys match."""
        self.index.check(expected_total=self.space.size)
        for n, (entry, eff) in enumerate(self.index.walk()):
            data = self.space.pread(eff, entry.size)
            ci = CachedInterval.decode(data)
            if entry.count != -1:
                assert entry.count == len(ci.keys), (
                    f"interval {n}: count {entry.count} != {len(ci.keys)}")
            if n > 0 and ci.keys:
                assert entry.ikey == ci.keys[0], (
                    f"interval {n}: index key {entry.ikey!r} != {ci.keys[0]!r}")
            if entry.cache is not None:
                assert entry.cache.keys == ci.keys, f"interval {n}: stale cache keys"
                assert entry.cache.values == ci.values, f"interval {n}: stale cache"

    def decode_everything(self) -> list[tuple[bytes, bytes]]:
        data = self.space.pread(0, self.space.size)
        out = []
        pos = 0
        while pos < len(data):
            key, value, pos = decode_record(data, pos)
            out.append((key, value))
        return out
