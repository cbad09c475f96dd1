"""In-memory extent index with O(log N) range shifts.

Maps a byte-granular logical address space to physical byte addresses.
The structure is a B+-tree whose offsets are stored indirectly: every
child pointer in an internal node carries a signed *shift* value, and
extents and pivots store *partial offsets*.  An entry's effective
logical offset is its partial offset plus the sum of the shift values
on its root-to-leaf search path.

Inserting or removing a byte range in the middle of the space must
logically move everything behind it.  Instead of rewriting every later
entry, the update adds the delta to the partial offsets after the
insertion point inside one leaf, and to the shifts and pivots after the
search path position in each ancestor, touching O(height) nodes total.

Leaves tile the space: entries are contiguous, and holes are recorded
explicitly as entries carrying the UNMAPPED sentinel address.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from typing import Iterator, NamedTuple

from .errors import OutOfRangeError, RemapError

# Largest 48-bit value; reserved to mark unmapped (hole) ranges.
UNMAPPED = (1 << 48) - 1

MAX_LENGTH = (1 << 32) - 1  # extent lengths are 32-bit

DEFAULT_CAPACITY = 64
DEFAULT_PARTIAL_BITS = 48


class Run(NamedTuple):
    """A physically contiguous chunk of a query result."""

    phys: int
    length: int


class Extent(NamedTuple):
    """A leaf entry resolved to its effective logical start."""

    start: int
    length: int
    phys: int


class _Leaf:
    __slots__ = ("poffs", "lens", "phys")

    def __init__(self, poffs=None, lens=None, phys=None):
        self.poffs: list[int] = poffs if poffs is not None else []
        self.lens: list[int] = lens if lens is not None else []
        self.phys: list[int] = phys if phys is not None else []


class _Inner:
    __slots__ = ("shifts", "children", "pivots")

    def __init__(self, shifts, children, pivots):
        self.shifts: list[int] = shifts
        self.children: list = children
        self.pivots: list[int] = pivots


class FlexTree:
    """Extent index over ``[0, total_size())`` supporting range shifts.

    Single-writer, multi-reader: the tree performs no locking of its
    own.  ``capacity`` bounds entries per leaf and children per internal
    node; nodes on a mutating descent are split one entry early so a
    boundary split never overflows.  ``coalesce_limit``, when set, lets
    ``insert_range(..., coalesce=True)`` extend a physically adjacent
    predecessor up to that many bytes instead of adding an entry.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY,
                 partial_bits: int = DEFAULT_PARTIAL_BITS,
                 coalesce_limit: int | None = None):
        if capacity < 6:
            raise ValueError("capacity must be at least 6")
        self._capacity = capacity
        self._partial_limit = 1 << partial_bits
        self._rebase_threshold = 1 << (partial_bits - 1)
        self._coalesce_limit = coalesce_limit
        self._root = _Leaf()
        self._total = 0
        self._mapped = 0
        # Dirty tracking: _dirty accumulates until the owner clears it
        # (used for copy-on-write checkpoints); per-op counters feed the
        # benchmarks and the shift-locality checks.
        self._dirty: set = set()
        self._op_touched: set = set()
        self._op_depth = 0
        self.last_op_dirtied = 0
        self.last_op_restructures = 0
        self._op_restructures = 0
        self.dirtied_node_total = 0
        self.op_total = 0

    # ------------------------------------------------------------------
    # queries

    def total_size(self) -> int:
        """Bytes in the logical address space, holes included."""
        return self._total

    def mapped_bytes(self) -> int:
        """Bytes currently mapped to a physical address."""
        return self._mapped

    def query_range(self, offset: int, length: int) -> list[Run]:
        """Resolve ``[offset, offset+length)`` to physical runs, in order.

        A run starting mid-extent reports its physical address advanced
        by the intra-extent distance; unmapped runs keep the sentinel.
        """
        if length == 0:
            return []
        if length < 0 or offset < 0 or offset + length > self._total:
            raise OutOfRangeError(
                f"query [{offset}, {offset}+{length}) exceeds size {self._total}")
        runs: list[Run] = []
        end = offset + length
        pos = offset
        for start, elen, ephys in self._entries_from(offset):
            skip = pos - start
            n = min(elen - skip, end - pos)
            runs.append(Run(ephys if ephys == UNMAPPED else ephys + skip, n))
            pos += n
            if pos >= end:
                break
        return runs

    def find_extent(self, offset: int) -> tuple[int, int, int]:
        """Return ``(effective_start, phys, length)`` of the extent holding ``offset``."""
        if not 0 <= offset < self._total:
            raise OutOfRangeError(f"offset {offset} outside [0, {self._total})")
        start, elen, ephys = next(self._entries_from(offset))
        return start, ephys, elen

    def extents(self, offset: int = 0) -> Iterator[Extent]:
        """Iterate leaf entries from the one containing ``offset`` onward."""
        if self._total == 0 or offset >= self._total:
            return
        for start, elen, ephys in self._entries_from(offset):
            yield Extent(start, elen, ephys)

    # ------------------------------------------------------------------
    # mutations

    def insert_range(self, offset: int, length: int, phys: int = UNMAPPED,
                     coalesce: bool = False) -> None:
        """Insert a run at ``offset``, shifting everything behind it by ``+length``."""
        self._check_new_run(length, phys)
        if not 0 <= offset <= self._total:
            raise OutOfRangeError(
                f"insert at {offset} beyond size {self._total}")
        self._begin_op()
        try:
            leaf, acc, path = self._locate_for_mutation(offset)
            rel = offset - acc
            poffs, lens, physl = leaf.poffs, leaf.lens, leaf.phys
            idx = bisect_left(poffs, rel)
            if idx > 0 and poffs[idx - 1] + lens[idx - 1] > rel:
                # Insertion lands inside an extent: split it first.
                self._carve(leaf, idx - 1, rel - poffs[idx - 1])
            if (coalesce and self._coalesce_limit is not None and idx > 0
                    and phys != UNMAPPED
                    and physl[idx - 1] != UNMAPPED
                    and poffs[idx - 1] + lens[idx - 1] == rel
                    and physl[idx - 1] + lens[idx - 1] == phys
                    and lens[idx - 1] + length <= self._coalesce_limit):
                lens[idx - 1] += length
            else:
                poffs.insert(idx, rel)
                lens.insert(idx, length)
                physl.insert(idx, phys)
                idx += 1
            if idx < len(poffs):
                poffs[idx:] = [p + length for p in poffs[idx:]]
            for node, ci in path:
                shifts = node.shifts
                if ci + 1 < len(shifts):
                    shifts[ci + 1:] = [s + length for s in shifts[ci + 1:]]
                pivots = node.pivots
                if ci < len(pivots):
                    pivots[ci:] = [p + length for p in pivots[ci:]]
                self._mark(node)
            self._mark(leaf)
            self._total += length
            if phys != UNMAPPED:
                self._mapped += length
            if poffs[-1] >= self._rebase_threshold and path:
                parent, ci = path[-1]
                self._rebase_leaf(leaf, parent, ci)
        finally:
            self._end_op()

    def collapse_range(self, offset: int, length: int) -> list[Run]:
        """Remove ``[offset, offset+length)`` and shift later mappings back.

        Returns the removed runs in order; unmapped stretches are
        reported with the UNMAPPED sentinel so callers can skip them in
        space accounting.
        """
        if length == 0:
            return []
        if length < 0 or offset < 0 or offset + length > self._total:
            raise OutOfRangeError(
                f"collapse [{offset}, {offset}+{length}) exceeds size {self._total}")
        freed: list[Run] = []
        self._begin_op()
        try:
            self._split_extent_at(offset + length)
            self._split_extent_at(offset)
            remaining = length
            while remaining > 0:
                leaf, acc, path = self._locate(offset)
                poffs, lens, physl = leaf.poffs, leaf.lens, leaf.phys
                rel = offset - acc
                idx = bisect_left(poffs, rel)
                taken = 0
                batch = 0
                unmapped = 0
                while idx + taken < len(poffs) and batch + lens[idx + taken] <= remaining:
                    j = idx + taken
                    freed.append(Run(physl[j], lens[j]))
                    batch += lens[j]
                    if physl[j] == UNMAPPED:
                        unmapped += lens[j]
                    taken += 1
                if taken == 0:
                    raise AssertionError("collapse did not land on an extent boundary")
                stop = idx + taken
                del poffs[idx:stop]
                del lens[idx:stop]
                del physl[idx:stop]
                if idx < len(poffs):
                    poffs[idx:] = [p - batch for p in poffs[idx:]]
                for node, ci in path:
                    shifts = node.shifts
                    if ci + 1 < len(shifts):
                        shifts[ci + 1:] = [s - batch for s in shifts[ci + 1:]]
                    pivots = node.pivots
                    if ci < len(pivots):
                        pivots[ci:] = [p - batch for p in pivots[ci:]]
                    self._mark(node)
                self._mark(leaf)
                self._total -= batch
                self._mapped -= batch - unmapped
                remaining -= batch
                self._fix_underflow(leaf, path)
        finally:
            self._end_op()
        return freed

    def write_range(self, offset: int, length: int, phys: int,
                    coalesce: bool = False) -> list[Run]:
        """Map ``[offset, offset+length)`` to ``phys`` without shifting.

        Boundary extents are split; a gap between the current end of the
        space and ``offset`` becomes an explicit unmapped entry.  Returns
        the runs the write replaced.
        """
        self._check_new_run(length, phys)
        if offset < 0:
            raise OutOfRangeError(f"negative offset {offset}")
        self._begin_op()
        try:
            if offset > self._total:
                self.insert_range(self._total, offset - self._total, UNMAPPED)
            overlap = min(length, self._total - offset)
            replaced = self.collapse_range(offset, overlap) if overlap > 0 else []
            self.insert_range(offset, length, phys, coalesce=coalesce)
        finally:
            self._end_op()
        return replaced

    def remap(self, offset: int, length: int, new_phys: int) -> None:
        """Point a sub-run of one mapped extent at ``new_phys``.

        No effective offset changes anywhere.  The target must lie
        entirely within a single mapped extent.
        """
        self._check_new_run(length, new_phys)
        if new_phys == UNMAPPED:
            raise RemapError("cannot remap to the unmapped sentinel")
        if not (0 <= offset and offset + length <= self._total):
            raise OutOfRangeError(
                f"remap [{offset}, {offset}+{length}) exceeds size {self._total}")
        self._begin_op()
        try:
            leaf, acc, path = self._locate_for_mutation(offset)
            poffs, lens, physl = leaf.poffs, leaf.lens, leaf.phys
            rel = offset - acc
            idx = bisect_right(poffs, rel) - 1
            if physl[idx] == UNMAPPED:
                raise RemapError("remap range covers a hole")
            if rel + length > poffs[idx] + lens[idx]:
                raise RemapError("remap range spans extents")
            if rel > poffs[idx]:
                self._carve(leaf, idx, rel - poffs[idx])
                idx += 1
            if length < lens[idx]:
                self._carve(leaf, idx, length)
            physl[idx] = new_phys
            self._mark(leaf)
            for node, ci in path:
                self._mark(node)
        finally:
            self._end_op()

    # ------------------------------------------------------------------
    # descent helpers

    def _node_size(self, node) -> int:
        if isinstance(node, _Inner):
            return len(node.children)
        return len(node.poffs)

    def _locate(self, offset):
        """Leaf whose range holds ``offset``, its shift sum, and the path."""
        node = self._root
        acc = 0
        path = []
        while isinstance(node, _Inner):
            i = bisect_right(node.pivots, offset - acc)
            path.append((node, i))
            acc += node.shifts[i]
            node = node.children[i]
        return node, acc, path

    def _locate_for_mutation(self, offset):
        # Split full nodes on the way down so a boundary split plus an
        # insertion (two new entries worst case) always fits.
        limit = self._capacity - 1
        root = self._root
        if self._node_size(root) >= limit:
            new_root = _Inner([0], [root], [])
            self._split_child(new_root, 0)
            self._root = new_root
        node = self._root
        acc = 0
        path = []
        while isinstance(node, _Inner):
            i = bisect_right(node.pivots, offset - acc)
            if self._node_size(node.children[i]) >= limit:
                self._split_child(node, i)
                i = bisect_right(node.pivots, offset - acc)
            path.append((node, i))
            acc += node.shifts[i]
            node = node.children[i]
        return node, acc, path

    def _entries_from(self, offset):
        """Yield ``(effective_start, length, phys)`` from the entry holding ``offset``."""
        node = self._root
        acc = 0
        stack = []  # (inner, child index, acc before the child's shift)
        while isinstance(node, _Inner):
            i = bisect_right(node.pivots, offset - acc)
            stack.append((node, i, acc))
            acc += node.shifts[i]
            node = node.children[i]
        idx = bisect_right(node.poffs, offset - acc) - 1
        if idx < 0:
            idx = 0
        while True:
            poffs, lens, physl = node.poffs, node.lens, node.phys
            for j in range(idx, len(poffs)):
                yield acc + poffs[j], lens[j], physl[j]
            while stack:
                inner, i, acc0 = stack[-1]
                if i + 1 < len(inner.children):
                    i += 1
                    stack[-1] = (inner, i, acc0)
                    acc = acc0 + inner.shifts[i]
                    node = inner.children[i]
                    while isinstance(node, _Inner):
                        stack.append((node, 0, acc))
                        acc += node.shifts[0]
                        node = node.children[0]
                    break
                stack.pop()
            else:
                return
            idx = 0

    # ------------------------------------------------------------------
    # structure maintenance

    def _carve(self, leaf, idx, head_len):
        # Split entry idx into a head of head_len bytes and a tail entry.
        # Pure representation change: no effective offset moves.
        poffs, lens, physl = leaf.poffs, leaf.lens, leaf.phys
        tail_phys = physl[idx]
        if tail_phys != UNMAPPED:
            tail_phys += head_len
        poffs.insert(idx + 1, poffs[idx] + head_len)
        lens.insert(idx + 1, lens[idx] - head_len)
        physl.insert(idx + 1, tail_phys)
        lens[idx] = head_len
        self._mark(leaf)

    def _split_extent_at(self, offset):
        # Ensure `offset` is an extent boundary (splitting if mid-extent).
        if offset <= 0 or offset >= self._total:
            return
        leaf, acc, path = self._locate_for_mutation(offset)
        rel = offset - acc
        idx = bisect_left(leaf.poffs, rel)
        if idx < len(leaf.poffs) and leaf.poffs[idx] == rel:
            return
        self._carve(leaf, idx - 1, rel - leaf.poffs[idx - 1])
        for node, ci in path:
            self._mark(node)

    def _split_child(self, parent, i):
        """Split ``parent.children[i]`` in half; no effective offset changes.

        The new right node's pointer inherits the old pointer's shift,
        and the new pivot's partial offset is the median entry's partial
        offset plus that inherited shift, so it lands at the effective
        offset of the first entry moving right.
        """
        child = parent.children[i]
        s = parent.shifts[i]
        if isinstance(child, _Inner):
            m = len(child.children) // 2
            right = _Inner(child.shifts[m:], child.children[m:], child.pivots[m:])
            pivot_partial = child.pivots[m - 1] + s
            del child.shifts[m:]
            del child.children[m:]
            del child.pivots[m - 1:]
        else:
            m = len(child.poffs) // 2
            right = _Leaf(child.poffs[m:], child.lens[m:], child.phys[m:])
            pivot_partial = child.poffs[m] + s
            del child.poffs[m:]
            del child.lens[m:]
            del child.phys[m:]
        parent.children.insert(i + 1, right)
        parent.shifts.insert(i + 1, s)
        parent.pivots.insert(i, pivot_partial)
        self._mark(parent)
        self._mark(child)
        self._mark(right)
        self._op_restructures += 1

    def _merge_adjacent(self, parent, li):
        """Fold ``parent.children[li+1]`` into ``parent.children[li]``.

        Moved entries get their partial offsets (and, for internal
        nodes, child shifts) adjusted by the difference of the two
        pointers' shifts, keeping every effective offset unchanged.
        """
        ri = li + 1
        left = parent.children[li]
        right = parent.children[ri]
        d = parent.shifts[ri] - parent.shifts[li]
        if isinstance(left, _Inner):
            sep = parent.pivots[ri - 1] - parent.shifts[li]
            left.pivots.extend([sep] + [p + d for p in right.pivots])
            left.shifts.extend(s + d for s in right.shifts)
            left.children.extend(right.children)
        else:
            left.poffs.extend(p + d for p in right.poffs)
            left.lens.extend(right.lens)
            left.phys.extend(right.phys)
        del parent.children[ri]
        del parent.shifts[ri]
        del parent.pivots[ri - 1]
        self._mark(parent)
        self._mark(left)
        self._op_restructures += 1
        if isinstance(left, _Leaf) and left.poffs and \
                left.poffs[-1] >= self._rebase_threshold:
            self._rebase_leaf(left, parent, li)

    def _rebase_leaf(self, leaf, parent, ci):
        """Shrink a leaf's partial offsets by their minimum.

        The minimum moves into the parent pointer's shift, so effective
        offsets are untouched.  Run proactively when the largest partial
        offset nears the configured bit width.
        """
        m = leaf.poffs[0]
        if m == 0:
            return
        leaf.poffs = [p - m for p in leaf.poffs]
        parent.shifts[ci] += m
        self._mark(leaf)
        self._mark(parent)

    def _fix_underflow(self, node, path):
        merge_cap = self._capacity // 2
        for parent, ci in reversed(path):
            size = self._node_size(node)
            if size == 0:
                del parent.children[ci]
                del parent.shifts[ci]
                if parent.pivots:
                    del parent.pivots[ci - 1 if ci > 0 else 0]
                self._mark(parent)
            else:
                if ci > 0 and size + self._node_size(parent.children[ci - 1]) <= merge_cap:
                    self._merge_adjacent(parent, ci - 1)
                elif ci + 1 < len(parent.children) and \
                        size + self._node_size(parent.children[ci + 1]) <= merge_cap:
                    self._merge_adjacent(parent, ci)
            node = parent
        root = self._root
        while isinstance(root, _Inner):
            if len(root.children) == 0:
                root = _Leaf()
                break
            if len(root.children) > 1:
                break
            # Height shrinks: push the lone pointer's shift down.
            s = root.shifts[0]
            child = root.children[0]
            if s != 0:
                if isinstance(child, _Inner):
                    child.shifts = [x + s for x in child.shifts]
                    child.pivots = [p + s for p in child.pivots]
                else:
                    child.poffs = [p + s for p in child.poffs]
                self._mark(child)
            root = child
        self._root = root

    # ------------------------------------------------------------------
    # bookkeeping

    def _check_new_run(self, length, phys):
        if length <= 0 or length > MAX_LENGTH:
            raise OutOfRangeError(f"bad run length {length}")
        if not 0 <= phys <= UNMAPPED:
            raise OutOfRangeError(f"bad physical address {phys}")

    def _begin_op(self):
        if self._op_depth == 0:
            self._op_touched = set()
            self._op_restructures = 0
        self._op_depth += 1

    def _end_op(self):
        self._op_depth -= 1
        if self._op_depth == 0:
            touched = self._op_touched
            self.last_op_dirtied = len(touched)
            self.last_op_restructures = self._op_restructures
            self.dirtied_node_total += len(touched)
            self.op_total += 1
            self._dirty.update(touched)

    def _mark(self, node):
        self._op_touched.add(node)

    def dirty_nodes(self) -> set:
        """Nodes mutated since the last ``clear_dirty`` (checkpoint support)."""
        return self._dirty

    def clear_dirty(self) -> None:
        self._dirty = set()

    def reset_op_stats(self) -> None:
        self.dirtied_node_total = 0
        self.op_total = 0

    def height(self) -> int:
        """Levels from root to leaves (1 when the root is a leaf)."""
        h = 1
        node = self._root
        while isinstance(node, _Inner):
            h += 1
            node = node.children[0]
        return h

    # ------------------------------------------------------------------
    # debugging and verification

    def debug_dump(self) -> dict:
        """Deterministic nested dump of per-node shift/partial values."""

        def walk(node):
            if isinstance(node, _Inner):
                return {
                    "kind": "inner",
                    "shifts": list(node.shifts),
                    "pivots": list(node.pivots),
                    "children": [walk(c) for c in node.children],
                }
            return {
                "kind": "leaf",
                "entries": list(zip(node.poffs, node.lens, node.phys)),
            }

        return {
            "total": self._total,
            "mapped": self._mapped,
            "runs": [tuple(e) for e in self.extents()],
            "root": walk(self._root),
        }

    def check(self) -> None:
        """Validate structural invariants; raises AssertionError on breach."""
        leaf_depths = set()
        entries: list[tuple[int, int, int]] = []
        cap = self._capacity
        limit = self._partial_limit

        def first_eff(node, acc):
            while isinstance(node, _Inner):
                acc += node.shifts[0]
                node = node.children[0]
            return acc + node.poffs[0] if node.poffs else None

        def walk(node, acc, depth):
            if isinstance(node, _Inner):
                assert len(node.children) <= cap, "fanout overflow"
                assert len(node.pivots) == len(node.children) - 1, "pivot count"
                for k in range(1, len(node.pivots)):
                    assert node.pivots[k - 1] < node.pivots[k], "pivot order"
                for i, child in enumerate(node.children):
                    if i > 0:
                        fe = first_eff(child, acc + node.shifts[i])
                        assert fe is not None, "empty non-root subtree"
                        assert fe == acc + node.pivots[i - 1], (
                            f"pivot {acc + node.pivots[i - 1]} != subtree first {fe}")
                    walk(child, acc + node.shifts[i], depth + 1)
            else:
                leaf_depths.add(depth)
                assert len(node.poffs) <= cap, "leaf overflow"
                for k, p in enumerate(node.poffs):
                    assert 0 <= p < limit, f"partial offset {p} out of range"
                    assert node.lens[k] > 0, "zero-length extent"
                    entries.append((acc + p, node.lens[k], node.phys[k]))

        walk(self._root, 0, 0)
        if isinstance(self._root, _Inner):
            assert len(self._root.children) >= 2, "degenerate root"
        assert len(leaf_depths) <= 1, f"leaves at multiple depths: {leaf_depths}"
        pos = 0
        mapped = 0
        for start, elen, ephys in entries:
            assert start == pos, f"tiling gap at {pos}: entry starts {start}"
            pos += elen
            if ephys != UNMAPPED:
                mapped += elen
        assert pos == self._total, f"total {self._total} != tiled {pos}"
        assert mapped == self._mapped, f"mapped {self._mapped} != tiled {mapped}"

    @classmethod
    def _wrap(cls, root, capacity: int = DEFAULT_CAPACITY,
              partial_bits: int = DEFAULT_PARTIAL_BITS) -> "FlexTree":
        # Test/deserialization hook: adopt a prebuilt node graph.
        tree = cls(capacity=capacity, partial_bits=partial_bits)
        tree._root = root
        total = 0
        mapped = 0
        for _, elen, ephys in tree._entries_from(0):
            total += elen
            if ephys != UNMAPPED:
                mapped += elen
        tree._total = total
        tree._mapped = mapped
        return tree
