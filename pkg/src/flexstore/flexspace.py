"""Persistent flexible address space.

One space is three files in a flat namespace:

* ``data``: raw fixed-size segments, written log-structured.  A
  physical address is a byte offset into this file.  No headers.
* ``tree``: copy-on-write image of the extent index.  A 512-byte header
  (magic, version, root position, config, CRC) is the single atomic
  commit point; nodes live in fixed-size slots after byte 4096.
* ``log``: logical log.  A 512-byte header records which tree version
  the entries apply to, followed by framed batches of 24-byte records.
  Replaying the log on the checkpointed tree reproduces the current
  in-memory tree.

Write ordering per barrier: flush buffered segment bytes, fence the
data file, append the buffered log entries as one CRC-framed batch,
fence the log file.  A checkpoint additionally rewrites dirty tree
nodes into free slots, fences, atomically replaces the header, fences,
and reinitializes the log under the new version number.

Garbage collection relocates live extents out of the most underutilized
segments.  With extents capped at 1/32 of a segment and utilization
capped at 30/32, relocating any victim at or below 31/32 utilization
nets at least one max-extent worth of free space, so writes can always
make progress.  Reclaimed segments become reusable only after the log
commit that records the relocations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from zlib import crc32

from .errors import (
    CorruptionError,
    OutOfRangeError,
    SpaceExhaustedError,
    StoreClosedError,
    UnrecoverableStoreError,
)
from .flextree import UNMAPPED, FlexTree, _Inner, _Leaf
from .locks import ReadWriteLock
from .storage import DiskStorage, Storage

SEGMENTS_PER_EXTENT = 32  # K: segment_size / max_extent

TREE_MAGIC = b"FXTR"
LOG_MAGIC = b"FXLG"
FORMAT_VERSION = 1
HEADER_SIZE = 512
SLOT_REGION = 4096

OP_INSERT = 0
OP_REMOVE = 1
OP_WRITE = 2
OP_RELOCATE = 3

_ENTRY = struct.Struct("<QQQ")  # 24-byte log record, op code in the top bits
ENTRY_SIZE = _ENTRY.size
_BATCH_HDR = struct.Struct("<II")  # entry count, crc32(base_version + payload)

_TREE_HDR = struct.Struct("<4sB3xQQQQIIIIQQ")
_LOG_HDR = struct.Struct("<4sB3xQ")

_NODE_HDR = struct.Struct("<BH x")
KIND_LEAF = 0
KIND_INNER = 1
_LEN32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")


def pack_log_entry(op: int, a: int, b: int, c: int) -> bytes:
    return _ENTRY.pack(a, b, c | (op << 62))


def unpack_log_entry(buf: bytes, off: int = 0) -> tuple[int, int, int, int]:
    a, b, w = _ENTRY.unpack_from(buf, off)
    return w >> 62, a, b, w & ((1 << 62) - 1)


@dataclass
class SpaceConfig:
    """Tunables for one space; persisted in the tree-file header."""

    segment_size: int = 4 << 20
    max_extent: int = (4 << 20) // SEGMENTS_PER_EXTENT
    utilization_num: int = 30
    utilization_den: int = 32
    reserved_free_segments: int = 64
    log_size_threshold: int = 4 << 20
    tree_capacity: int = 64
    capacity_segments: int | None = None  # None: the data file may grow freely
    log_buffer_entries: int = 16384

    def validate(self) -> None:
        if self.max_extent * SEGMENTS_PER_EXTENT != self.segment_size:
            raise ValueError("max_extent must be segment_size/32")
        k = SEGMENTS_PER_EXTENT
        if self.utilization_num * k > (k - 1) * self.utilization_den:
            raise ValueError("utilization cap above (K-1)/K breaks GC progress")
        if self.capacity_segments is not None and \
                self.capacity_segments < self.reserved_free_segments + 1:
            raise ValueError("capacity below the reserved free segments")


def _pack_node(node, child_pos=None) -> bytes:
    if isinstance(node, _Leaf):
        parts = [_NODE_HDR.pack(KIND_LEAF, len(node.poffs))]
        for p, ln, a in zip(node.poffs, node.lens, node.phys):
            parts.append(p.to_bytes(6, "little"))
            parts.append(_LEN32.pack(ln))
            parts.append(a.to_bytes(6, "little"))
    else:
        parts = [_NODE_HDR.pack(KIND_INNER, len(node.children))]
        for s, pos in zip(node.shifts, child_pos):
            parts.append(_I64.pack(s))
            parts.append(_U64.pack(pos))
        for p in node.pivots:
            parts.append(_I64.pack(p))
    return b"".join(parts)


def _unpack_node(buf: bytes):
    """Returns (_Leaf) or (shifts, child_positions, pivots) for inners."""
    kind, count = _NODE_HDR.unpack_from(buf, 0)
    pos = _NODE_HDR.size
    if kind == KIND_LEAF:
        leaf = _Leaf()
        for _ in range(count):
            leaf.poffs.append(int.from_bytes(buf[pos:pos + 6], "little"))
            leaf.lens.append(_LEN32.unpack_from(buf, pos + 6)[0])
            leaf.phys.append(int.from_bytes(buf[pos + 10:pos + 16], "little"))
            pos += 16
        return leaf
    if kind != KIND_INNER:
        raise CorruptionError(f"bad node kind {kind}")
    shifts, positions, pivots = [], [], []
    for _ in range(count):
        shifts.append(_I64.unpack_from(buf, pos)[0])
        positions.append(_U64.unpack_from(buf, pos + 8)[0])
        pos += 16
    for _ in range(count - 1):
        pivots.append(_I64.unpack_from(buf, pos)[0])
        pos += 8
    return shifts, positions, pivots


class FlexSpace:
    """A byte-addressed persistent space with in-place range shifts."""

    def __init__(self, storage: Storage, config: SpaceConfig, *, _create: bool):
        config.validate()
        self.storage = storage
        self.config = config
        self.lock = ReadWriteLock()
        self._data = storage.open("data")
        self._treef = storage.open("tree")
        self._logf = storage.open("log")
        self.tree = FlexTree(capacity=config.tree_capacity,
                             coalesce_limit=config.max_extent)
        self.version = 1
        self._closed = False
        # segment state
        self._seg_valid: list[int] = []
        self._free_segs: set[int] = set()
        self._pending_free: set[int] = set()
        self._open_seg: int | None = None
        self._open_buf = bytearray()
        self._open_flushed = 0
        self._data_dirty = False
        self._in_gc = False
        # log state
        self._log_buf: list[bytes] = []
        self._log_tail = HEADER_SIZE
        # tree-file slots
        self._slot_size = self._compute_slot_size(config.tree_capacity)
        self._node_pos: dict = {}
        self._free_slots: list[int] = []
        self._slot_count = 0
        # counters
        self.logical_bytes = 0
        self.commit_seq = 0
        self.commit_listener = None
        self.checkpoints = 0
        self.last_gc: dict | None = None
        if _create:
            self._initialize()
        else:
            self._recover()

    # ------------------------------------------------------------------
    # lifecycle

    @classmethod
    def create(cls, directory: str | None = None, config: SpaceConfig | None = None,
               storage: Storage | None = None) -> "FlexSpace":
        storage = storage or DiskStorage(directory)
        if storage.exists("tree"):
            raise ValueError("space already exists")
        return cls(storage, config or SpaceConfig(), _create=True)

    @classmethod
    def open(cls, directory: str | None = None, storage: Storage | None = None) -> "FlexSpace":
        storage = storage or DiskStorage(directory)
        if not storage.exists("tree"):
            raise UnrecoverableStoreError("no tree file in store directory")
        return cls(storage, SpaceConfig(), _create=False)

    @classmethod
    def open_or_create(cls, directory: str | None = None,
                       config: SpaceConfig | None = None,
                       storage: Storage | None = None) -> "FlexSpace":
        storage = storage or DiskStorage(directory)
        if storage.exists("tree"):
            return cls.open(storage=storage)
        return cls.create(config=config, storage=storage)

    def close(self) -> None:
        if self._closed:
            return
        self.checkpoint()
        self._closed = True
        self.storage.close()

    def _check_open(self):
        if self._closed:
            raise StoreClosedError("space is closed")

    # ------------------------------------------------------------------
    # public data plane

    @property
    def size(self) -> int:
        return self.tree.total_size()

    def pread(self, offset: int, length: int) -> bytes:
        self._check_open()
        with self.lock.read_locked():
            if offset < 0 or offset + length > self.size:
                raise OutOfRangeError(
                    f"pread [{offset}, {offset}+{length}) beyond size {self.size}")
            if length == 0:
                return b""
            parts = []
            for phys, n in self.tree.query_range(offset, length):
                if phys == UNMAPPED:
                    parts.append(bytes(n))
                else:
                    parts.append(self._read_phys(phys, n))
            return b"".join(parts)

    def pwrite(self, offset: int, data: bytes) -> None:
        """Overwrite (or extend) without shifting any other mapping."""
        self._check_open()
        if not data:
            raise OutOfRangeError("empty pwrite")
        if offset < 0:
            raise OutOfRangeError(f"negative offset {offset}")
        with self.lock.write_locked():
            overlap = min(len(data), max(0, self.size - offset))
            replaced_mapped = 0
            if overlap:
                for phys, n in self.tree.query_range(offset, overlap):
                    if phys != UNMAPPED:
                        replaced_mapped += n
            self._admit(len(data) - replaced_mapped)
            cur = offset
            for chunk_phys, n in self._append_bytes(data):
                replaced = self.tree.write_range(
                    cur, n, chunk_phys, coalesce=chunk_phys % self.config.segment_size != 0)
                for run in replaced:
                    self._debit(run.phys, run.length)
                self._log_buf.append(pack_log_entry(OP_WRITE, cur, n, chunk_phys))
                cur += n
            self.logical_bytes += len(data)
            self._after_mutation()

    def insert_range(self, offset: int, data: bytes) -> None:
        """Insert bytes at ``offset``; everything behind shifts forward."""
        self._check_open()
        if not data:
            raise OutOfRangeError("empty insert")
        with self.lock.write_locked():
            if not 0 <= offset <= self.size:
                raise OutOfRangeError(f"insert at {offset} beyond size {self.size}")
            self._admit(len(data))
            self._insert_bytes(offset, data)
            self.logical_bytes += len(data)
            self._after_mutation()

    def collapse_range(self, offset: int, length: int) -> None:
        """Remove ``[offset, offset+length)``; later data shifts back."""
        self._check_open()
        with self.lock.write_locked():
            if length <= 0 or offset < 0 or offset + length > self.size:
                raise OutOfRangeError(
                    f"collapse [{offset}, {offset}+{length}) beyond size {self.size}")
            for run in self.tree.collapse_range(offset, length):
                self._debit(run.phys, run.length)
            self._log_buf.append(pack_log_entry(OP_REMOVE, offset, length, 0))
            self._after_mutation()

    def read_extent(self, offset: int, maxlen: int) -> tuple[int, bytes, int]:
        """Read from the start of the extent containing ``offset``.

        Returns ``(extent_start, data, nread)``; holes read zero bytes.
        """
        self._check_open()
        with self.lock.read_locked():
            if not 0 <= offset < self.size:
                raise OutOfRangeError(f"offset {offset} beyond size {self.size}")
            start, phys, elen = self.tree.find_extent(offset)
            if phys == UNMAPPED:
                return start, b"", 0
            n = min(elen, maxlen)
            return start, self._read_phys(phys, n), n

    def defrag(self, offset: int, length: int) -> None:
        """Rewrite the mapped runs in a range into fresh, contiguous space."""
        self._check_open()
        with self.lock.write_locked():
            if length < 0 or offset < 0 or offset + length > self.size:
                raise OutOfRangeError(
                    f"defrag [{offset}, {offset}+{length}) beyond size {self.size}")
            if length == 0:
                return
            # Collect maximal mapped stretches first; rewriting one does
            # not move anything outside it, so later starts stay valid.
            stretches = []
            pos = offset
            for phys, n in self.tree.query_range(offset, length):
                if phys != UNMAPPED:
                    if stretches and stretches[-1][0] + stretches[-1][1] == pos:
                        stretches[-1][1] += n
                    else:
                        stretches.append([pos, n])
                pos += n
            for start, n in stretches:
                content = self._read_runs(start, n)
                for run in self.tree.collapse_range(start, n):
                    self._debit(run.phys, run.length)
                self._log_buf.append(pack_log_entry(OP_REMOVE, start, n, 0))
                self._insert_bytes(start, content)
            self._after_mutation()

    # ------------------------------------------------------------------
    # durability plane

    def barrier(self) -> None:
        """Make everything done so far recoverable (data before log)."""
        self._check_open()
        with self.lock.write_locked():
            self._barrier_locked()
        self._maybe_checkpoint()

    def checkpoint(self) -> int:
        """Write dirty index nodes copy-on-write and bump the version."""
        self._check_open()
        with self.lock.write_locked():
            self._barrier_locked()
            self._checkpoint_locked()
        return self.version

    def gc(self) -> int:
        self._check_open()
        with self.lock.write_locked():
            return self._gc_locked()

    def recover(self) -> None:
        # open()/open_or_create() run recovery; exposed for tests.
        self._recover()

    def stats(self) -> dict:
        used = [v for s, v in enumerate(self._seg_valid)
                if v > 0 or s == self._open_seg]
        return {
            "version": self.version,
            "size": self.size,
            "mapped_bytes": self.tree.mapped_bytes(),
            "segments_allocated": len(self._seg_valid),
            "segments_free": len(self._free_segs) + len(self._pending_free),
            "segments_in_use": len(used),
            "bytes_written": self.storage.bytes_written,
            "bytes_read": self.storage.bytes_read,
            "logical_bytes": self.logical_bytes,
            "barriers": self.storage.barriers,
            "checkpoints": self.checkpoints,
            "commit_seq": self.commit_seq,
            "log_tail": self._log_tail,
        }

    def segment_snapshot(self) -> tuple[list[int], set[int], int | None]:
        return list(self._seg_valid), set(self._free_segs) | set(self._pending_free), self._open_seg

    # ------------------------------------------------------------------
    # write-path internals

    def _admit(self, add: int) -> None:
        cap = self.config.capacity_segments
        if cap is None or add <= 0:
            return
        budget = (self.config.utilization_num * cap *
                  self.config.segment_size) // self.config.utilization_den
        if self.tree.mapped_bytes() + add > budget:
            raise SpaceExhaustedError(
                f"utilization cap reached: {self.tree.mapped_bytes()}+{add} > {budget}")

    def _insert_bytes(self, offset: int, data: bytes) -> None:
        cur = offset
        for chunk_phys, n in self._append_bytes(data):
            self.tree.insert_range(
                cur, n, chunk_phys,
                coalesce=chunk_phys % self.config.segment_size != 0)
            self._log_buf.append(pack_log_entry(OP_INSERT, cur, n, chunk_phys))
            cur += n

    def _append_bytes(self, data: bytes):
        """Place bytes into segments and credit their valid counts.

        Returns the (phys, length) chunk list.  On allocation failure
        the already-placed chunks are uncredited and left behind as
        dead bytes in the open segment.
        """
        seg_size = self.config.segment_size
        max_extent = self.config.max_extent
        done = 0
        out = []
        try:
            while done < len(data):
                if self._open_seg is None:
                    self._open_segment()
                room = seg_size - len(self._open_buf)
                if room == 0:
                    self._seal_segment()
                    continue
                n = min(len(data) - done, max_extent, room)
                phys = self._open_seg * seg_size + len(self._open_buf)
                self._open_buf.extend(data[done:done + n])
                self._credit(phys, n)
                out.append((phys, n))
                done += n
        except Exception:
            for phys, n in out:
                self._seg_valid[phys // seg_size] -= n
            raise
        return out

    def _open_segment(self):
        self._open_seg = self._next_segment()
        self._open_buf = bytearray()
        self._open_flushed = 0

    def _seal_segment(self):
        self._flush_open()
        seg = self._open_seg
        self._open_seg = None
        if seg is not None and self._seg_valid[seg] == 0:
            self._pending_free.add(seg)

    def _flush_open(self):
        if self._open_seg is None:
            return
        fill = len(self._open_buf)
        if fill > self._open_flushed:
            base = self._open_seg * self.config.segment_size
            self._data.pwrite(base + self._open_flushed,
                              bytes(self._open_buf[self._open_flushed:fill]))
            self._open_flushed = fill
            self._data_dirty = True

    def _next_segment(self) -> int:
        for attempt in (0, 1):
            if self._free_segs:
                seg = min(self._free_segs)
                self._free_segs.discard(seg)
                if seg >= len(self._seg_valid):
                    self._seg_valid.extend(
                        0 for _ in range(seg + 1 - len(self._seg_valid)))
                return seg
            cap = self.config.capacity_segments
            if cap is None or len(self._seg_valid) < cap:
                self._seg_valid.append(0)
                return len(self._seg_valid) - 1
            if attempt == 0 and not self._in_gc:
                self._gc_locked()
            else:
                break
        raise SpaceExhaustedError("no free segment and GC reclaimed nothing")

    def _credit(self, phys: int, n: int) -> None:
        self._seg_valid[phys // self.config.segment_size] += n

    def _debit(self, phys: int, n: int) -> None:
        if phys == UNMAPPED:
            return
        seg = phys // self.config.segment_size
        self._seg_valid[seg] -= n
        if self._seg_valid[seg] == 0 and seg != self._open_seg:
            self._pending_free.add(seg)

    def _read_phys(self, phys: int, n: int) -> bytes:
        seg_size = self.config.segment_size
        if self._open_seg is not None and phys // seg_size == self._open_seg:
            off = phys % seg_size
            return bytes(self._open_buf[off:off + n])
        return self._data.pread(phys, n)

    def _read_runs(self, offset: int, length: int) -> bytes:
        parts = []
        for phys, n in self.tree.query_range(offset, length):
            parts.append(bytes(n) if phys == UNMAPPED else self._read_phys(phys, n))
        return b"".join(parts)

    def _after_mutation(self):
        if len(self._log_buf) >= self.config.log_buffer_entries:
            self._barrier_locked()
            self._maybe_checkpoint_locked()
        cap = self.config.capacity_segments
        if cap is not None and not self._in_gc:
            available = len(self._free_segs) + (cap - len(self._seg_valid))
            if available < self.config.reserved_free_segments:
                self._gc_locked()

    # ------------------------------------------------------------------
    # garbage collection

    def _gc_locked(self) -> int:
        if self._in_gc:
            return 0
        self._in_gc = True
        try:
            cfg = self.config
            seg_size = cfg.segment_size
            k = SEGMENTS_PER_EXTENT
            cap = cfg.capacity_segments
            if cap is not None:
                available = len(self._free_segs) + (cap - len(self._seg_valid))
                need = max(1, cfg.reserved_free_segments - available)
            else:
                need = max(1, cfg.reserved_free_segments - len(self._free_segs))
            skip = self._free_segs | self._pending_free
            candidates = sorted(
                (v, s) for s, v in enumerate(self._seg_valid)
                if s != self._open_seg and s not in skip)
            victims = []
            for v, s in candidates:
                if len(victims) >= need:
                    break
                # Above (K-1)/K utilization a relocation nets less than
                # one max extent; stop there.
                if v * k > seg_size * (k - 1):
                    break
                victims.append(s)
            if not victims:
                return 0
            report = {"victims": [], "reclaimed": 0}
            victim_set = set(victims)
            before = {s: self._seg_valid[s] for s in victims}
            moves = []
            for start, elen, phys in self.tree.extents():
                if phys != UNMAPPED and phys // seg_size in victim_set:
                    moves.append((start, elen, phys))
            for start, elen, phys in moves:
                content = self._read_phys(phys, elen)
                delta = 0
                for new_phys, n in self._append_bytes(content):
                    self.tree.remap(start + delta, n, new_phys)
                    self._debit(phys + delta, n)
                    self._log_buf.append(
                        pack_log_entry(OP_RELOCATE, phys + delta, n, new_phys))
                    delta += n
            for s in victims:
                if self._seg_valid[s] != 0:
                    raise AssertionError(f"victim {s} still holds valid bytes")
                self._pending_free.add(s)
                net = seg_size - before[s]
                report["victims"].append(
                    {"segment": s, "valid_before": before[s], "net_reclaimed": net})
                report["reclaimed"] += net
            # Relocations must be durable before the victims are reused.
            self._barrier_locked()
            self.last_gc = report
            return report["reclaimed"]
        finally:
            self._in_gc = False

    # ------------------------------------------------------------------
    # barrier / checkpoint / recovery internals

    def _barrier_locked(self):
        self._flush_open()
        if self._data_dirty:
            self._data.barrier()
            self._data_dirty = False
        if self._log_buf:
            payload = b"".join(self._log_buf)
            frame = _BATCH_HDR.pack(
                len(self._log_buf),
                crc32(self.version.to_bytes(8, "little") + payload)) + payload
            self._logf.pwrite(self._log_tail, frame)
            self._log_tail += len(frame)
            self._logf.barrier()
            self._log_buf.clear()
            self._note_commit()
        self._free_segs |= self._pending_free
        self._pending_free.clear()

    def _note_commit(self):
        self.commit_seq += 1
        if self.commit_listener is not None:
            self.commit_listener()

    def _maybe_checkpoint(self):
        if self._log_tail >= self.config.log_size_threshold + HEADER_SIZE:
            with self.lock.write_locked():
                self._maybe_checkpoint_locked()

    def _maybe_checkpoint_locked(self):
        if self._log_tail >= self.config.log_size_threshold + HEADER_SIZE:
            self._checkpoint_locked()

    def _checkpoint_locked(self):
        dirty = self.tree.dirty_nodes()
        new_pos: dict = {}

        def place(node) -> int:
            if node not in dirty:
                pos = self._node_pos.get(node)
                if pos is not None:
                    return pos
            if isinstance(node, _Inner):
                child_pos = [place(c) for c in node.children]
                buf = _pack_node(node, child_pos)
            else:
                buf = _pack_node(node)
            slot = self._alloc_slot()
            self._treef.pwrite(SLOT_REGION + slot * self._slot_size, buf)
            new_pos[node] = SLOT_REGION + slot * self._slot_size
            return new_pos[node]

        root_pos = place(self.tree._root)
        self._treef.barrier()
        self.version += 1
        self._write_tree_header(root_pos)
        self._treef.barrier()
        self._reinit_log()
        # Commit done: refresh the in-memory slot map and free list.
        self._node_pos.update(new_pos)
        self.tree.clear_dirty()
        live: dict = {}
        stack = [self.tree._root]
        while stack:
            node = stack.pop()
            live[node] = self._node_pos[node]
            if isinstance(node, _Inner):
                stack.extend(node.children)
        self._node_pos = live
        used = {(pos - SLOT_REGION) // self._slot_size for pos in live.values()}
        self._free_slots = sorted(set(range(self._slot_count)) - used, reverse=True)
        self.checkpoints += 1
        self._note_commit()

    def _alloc_slot(self) -> int:
        if self._free_slots:
            return self._free_slots.pop()
        slot = self._slot_count
        self._slot_count += 1
        return slot

    @staticmethod
    def _compute_slot_size(capacity: int) -> int:
        leaf = _NODE_HDR.size + capacity * 16
        inner = _NODE_HDR.size + capacity * 16 + (capacity - 1) * 8
        size = max(leaf, inner)
        return (size + 255) // 256 * 256

    def _write_tree_header(self, root_pos: int):
        cfg = self.config
        body = _TREE_HDR.pack(
            TREE_MAGIC, FORMAT_VERSION, self.version, root_pos,
            cfg.segment_size, cfg.max_extent,
            cfg.utilization_num, cfg.utilization_den,
            cfg.reserved_free_segments, cfg.tree_capacity,
            cfg.log_size_threshold,
            0 if cfg.capacity_segments is None else cfg.capacity_segments)
        block = body + _LEN32.pack(crc32(body))
        self._treef.pwrite(0, block.ljust(HEADER_SIZE, b"\x00"))

    def _read_tree_header(self):
        block = self._treef.pread(0, HEADER_SIZE)
        if len(block) < _TREE_HDR.size + 4:
            raise UnrecoverableStoreError("tree header truncated")
        body = block[:_TREE_HDR.size]
        (crc,) = _LEN32.unpack_from(block, _TREE_HDR.size)
        if crc32(body) != crc:
            raise UnrecoverableStoreError("tree header checksum mismatch")
        fields = _TREE_HDR.unpack(body)
        if fields[0] != TREE_MAGIC or fields[1] != FORMAT_VERSION:
            raise UnrecoverableStoreError("bad tree file magic or format")
        return fields

    def _reinit_log(self):
        body = _LOG_HDR.pack(LOG_MAGIC, FORMAT_VERSION, self.version)
        block = body + _LEN32.pack(crc32(body))
        self._logf.pwrite(0, block.ljust(HEADER_SIZE, b"\x00"))
        self._logf.barrier()
        self._logf.truncate(HEADER_SIZE)
        self._log_tail = HEADER_SIZE
        self._log_buf.clear()

    def _initialize(self):
        root_buf = _pack_node(self.tree._root)
        slot = self._alloc_slot()
        self._treef.pwrite(SLOT_REGION + slot * self._slot_size, root_buf)
        self._node_pos[self.tree._root] = SLOT_REGION + slot * self._slot_size
        self._treef.barrier()
        self._write_tree_header(self._node_pos[self.tree._root])
        self._treef.barrier()
        self._reinit_log()
        self.tree.clear_dirty()

    # -- recovery ---------------------------------------------------------

    def _recover(self):
        fields = self._read_tree_header()
        (_, _, version, root_pos, seg_size, max_extent, unum, uden,
         reserved, tree_cap, log_thresh, cap_segs) = fields
        self.config = SpaceConfig(
            segment_size=seg_size, max_extent=max_extent,
            utilization_num=unum, utilization_den=uden,
            reserved_free_segments=reserved, tree_capacity=tree_cap,
            log_size_threshold=log_thresh,
            capacity_segments=cap_segs or None,
            log_buffer_entries=self.config.log_buffer_entries)
        self.version = version
        self._slot_size = self._compute_slot_size(tree_cap)
        self.tree = FlexTree(capacity=tree_cap, coalesce_limit=max_extent)
        root, positions = self._load_tree(root_pos)
        self.tree._root = root
        total = 0
        mapped = 0
        for _, elen, ephys in self.tree._entries_from(0):
            total += elen
            if ephys != UNMAPPED:
                mapped += elen
        self.tree._total = total
        self.tree._mapped = mapped
        self._node_pos = positions
        file_slots = max(0, (self._treef.size() - SLOT_REGION +
                             self._slot_size - 1) // self._slot_size)
        used = {(pos - SLOT_REGION) // self._slot_size for pos in positions.values()}
        self._slot_count = max(file_slots, (max(used) + 1) if used else 0)
        self._free_slots = sorted(set(range(self._slot_count)) - used, reverse=True)
        self.tree.clear_dirty()
        self._replay_log()
        self._rebuild_segments()
        self._open_seg = None
        self._open_buf = bytearray()
        self._open_flushed = 0
        self._data_dirty = False

    def _load_tree(self, root_pos: int):
        positions: dict = {}

        def load(pos: int):
            buf = self._treef.pread(pos, self._slot_size)
            node = _unpack_node(buf)
            if isinstance(node, _Leaf):
                positions[node] = pos
                return node
            shifts, child_positions, pivots = node
            inner = _Inner(shifts, [load(p) for p in child_positions], pivots)
            positions[inner] = pos
            return inner

        return load(root_pos), positions

    def _replay_log(self):
        size = self._logf.size()
        if size < HEADER_SIZE:
            # Initialization was interrupted before the log existed.
            self._reinit_log()
            return
        block = self._logf.pread(0, HEADER_SIZE)
        body = block[:_LOG_HDR.size]
        (crc,) = _LEN32.unpack_from(block, _LOG_HDR.size)
        if crc32(body) != crc:
            raise UnrecoverableStoreError("log header checksum mismatch")
        magic, fmt, base = _LOG_HDR.unpack(body)
        if magic != LOG_MAGIC or fmt != FORMAT_VERSION:
            raise UnrecoverableStoreError("bad log file magic or format")
        if base > self.version:
            raise UnrecoverableStoreError(
                f"log base version {base} ahead of tree version {self.version}")
        if base < self.version:
            # Stale log from before the last checkpoint: drop it.
            self._reinit_log()
            return
        pos = HEADER_SIZE
        base_bytes = base.to_bytes(8, "little")
        while True:
            hdr = self._logf.pread(pos, _BATCH_HDR.size)
            if len(hdr) < _BATCH_HDR.size:
                break
            count, crc = _BATCH_HDR.unpack(hdr)
            if count == 0 or count > (1 << 30):
                break
            payload = self._logf.pread(pos + _BATCH_HDR.size, count * ENTRY_SIZE)
            if len(payload) < count * ENTRY_SIZE:
                break
            if crc32(base_bytes + payload) != crc:
                break
            self._apply_batch(payload, count)
            pos += _BATCH_HDR.size + count * ENTRY_SIZE
        self._log_tail = pos
        self._logf.truncate(pos)

    def _apply_batch(self, payload: bytes, count: int):
        seg = self.config.segment_size
        i = 0
        while i < count:
            op, a, b, c = unpack_log_entry(payload, i * ENTRY_SIZE)
            if op == OP_INSERT:
                self.tree.insert_range(a, b, c, coalesce=c % seg != 0)
            elif op == OP_REMOVE:
                self.tree.collapse_range(a, b)
            elif op == OP_WRITE:
                self.tree.write_range(a, b, c, coalesce=c % seg != 0)
            else:
                # A run of relocations: resolve old physical addresses to
                # logical offsets with one leaf scan, then remap each.  A
                # relocated extent may have been split across a segment
                # boundary, so follow chains of logged chunks.
                run = []
                j = i
                while j < count:
                    op2, a2, b2, c2 = unpack_log_entry(payload, j * ENTRY_SIZE)
                    if op2 != OP_RELOCATE:
                        break
                    run.append((a2, b2, c2))
                    j += 1
                targets = {old: (ln, new) for old, ln, new in run}
                plans = []
                for start, elen, ephys in self.tree.extents():
                    if ephys == UNMAPPED:
                        continue
                    d = 0
                    while d < elen:
                        tgt = targets.get(ephys + d)
                        if tgt is None:
                            break
                        ln, new_phys = tgt
                        plans.append((start + d, min(ln, elen - d), new_phys))
                        d += ln
                for start, ln, new_phys in plans:
                    self.tree.remap(start, ln, new_phys)
                i = j
                continue
            i += 1

    def _rebuild_segments(self):
        seg_size = self.config.segment_size
        file_segs = (self._data.size() + seg_size - 1) // seg_size
        self._seg_valid = [0] * file_segs
        for _, elen, phys in self.tree.extents():
            if phys == UNMAPPED:
                continue
            seg = phys // seg_size
            if seg >= len(self._seg_valid):
                self._seg_valid.extend(0 for _ in range(seg + 1 - len(self._seg_valid)))
            self._seg_valid[seg] += elen
        self._free_segs = {s for s, v in enumerate(self._seg_valid) if v == 0}
        self._pending_free = set()
