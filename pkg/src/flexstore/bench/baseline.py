"""Reference extent indexes with absolute offsets and O(N) shifts.

Two baselines mirror the shift-augmented index functionally: a plain
B+-tree whose leaves store absolute offsets (same node layout, no shift
values) and a flat sorted array.  A range insertion or removal must
rewrite the offset of every extent behind the edit point; the
``shifted_entries`` counter records exactly how many offsets each
operation touched.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right

from ..errors import OutOfRangeError
from ..flextree import UNMAPPED, Extent, Run


class _BLeaf:
    __slots__ = ("offs", "lens", "phys")

    def __init__(self, offs=None, lens=None, phys=None):
        self.offs = offs if offs is not None else []
        self.lens = lens if lens is not None else []
        self.phys = phys if phys is not None else []


class _BInner:
    __slots__ = ("children", "pivots")

    def __init__(self, children, pivots):
        self.children = children
        self.pivots = pivots


class BaselineBPlusTree:
    """B+-tree extent index storing absolute offsets everywhere."""

    def __init__(self, capacity: int = 64):
        self._capacity = capacity
        self._root = _BLeaf()
        self._total = 0
        self.shifted_entries = 0
        self.last_op_shifted = 0

    def total_size(self) -> int:
        return self._total

    # -- queries --------------------------------------------------------

    def _locate(self, offset):
        node = self._root
        path = []
        while isinstance(node, _BInner):
            i = bisect_right(node.pivots, offset)
            path.append((node, i))
            node = node.children[i]
        return node, path

    def _entries_from(self, offset):
        node = self._root
        stack = []
        while isinstance(node, _BInner):
            i = bisect_right(node.pivots, offset)
            stack.append((node, i))
            node = node.children[i]
        idx = max(0, bisect_right(node.offs, offset) - 1)
        while True:
            for j in range(idx, len(node.offs)):
                yield node.offs[j], node.lens[j], node.phys[j]
            while stack:
                inner, i = stack[-1]
                if i + 1 < len(inner.children):
                    stack[-1] = (inner, i + 1)
                    node = inner.children[i + 1]
                    while isinstance(node, _BInner):
                        stack.append((node, 0))
                        node = node.children[0]
                    break
                stack.pop()
            else:
                return
            idx = 0

    def query_range(self, offset, length):
        if length == 0:
            return []
        if offset < 0 or offset + length > self._total:
            raise OutOfRangeError("query out of range")
        runs = []
        pos = offset
        end = offset + length
        for start, elen, ephys in self._entries_from(offset):
            skip = pos - start
            n = min(elen - skip, end - pos)
            runs.append(Run(ephys if ephys == UNMAPPED else ephys + skip, n))
            pos += n
            if pos >= end:
                break
        return runs

    def find_extent(self, offset):
        if not 0 <= offset < self._total:
            raise OutOfRangeError("offset out of range")
        start, elen, ephys = next(self._entries_from(offset))
        return start, ephys, elen

    def extents(self, offset: int = 0):
        if self._total == 0 or offset >= self._total:
            return
        for start, elen, ephys in self._entries_from(offset):
            yield Extent(start, elen, ephys)

    # -- mutations --------------------------------------------------------

    def _node_size(self, node):
        return len(node.children) if isinstance(node, _BInner) else len(node.offs)

    def _split_child(self, parent, i):
        child = parent.children[i]
        if isinstance(child, _BInner):
            m = len(child.children) // 2
            right = _BInner(child.children[m:], child.pivots[m:])
            pivot = child.pivots[m - 1]
            del child.children[m:]
            del child.pivots[m - 1:]
        else:
            m = len(child.offs) // 2
            right = _BLeaf(child.offs[m:], child.lens[m:], child.phys[m:])
            pivot = child.offs[m]
            del child.offs[m:]
            del child.lens[m:]
            del child.phys[m:]
        parent.children.insert(i + 1, right)
        parent.pivots.insert(i, pivot)

    def _locate_for_mutation(self, offset):
        limit = self._capacity - 1
        if self._node_size(self._root) >= limit:
            root = self._root
            self._root = _BInner([root], [])
            self._split_child(self._root, 0)
        node = self._root
        path = []
        while isinstance(node, _BInner):
            i = bisect_right(node.pivots, offset)
            if self._node_size(node.children[i]) >= limit:
                self._split_child(node, i)
                i = bisect_right(node.pivots, offset)
            path.append((node, i))
            node = node.children[i]
        return node, path

    def _shift_subtree(self, node, delta):
        if isinstance(node, _BInner):
            node.pivots = [p + delta for p in node.pivots]
            for child in node.children:
                self._shift_subtree(child, delta)
        else:
            node.offs = [o + delta for o in node.offs]
            self.shifted_entries += len(node.offs)
            self.last_op_shifted += len(node.offs)

    def _shift_after_path(self, path, delta):
        # Every extent behind the edit point is individually updated:
        # the honest O(N) cost of an absolute-offset index.
        for node, ci in path:
            for j in range(ci, len(node.pivots)):
                node.pivots[j] += delta
            for child in node.children[ci + 1:]:
                self._shift_subtree(child, delta)

    def insert_range(self, offset, length, phys=UNMAPPED, coalesce=False):
        if length <= 0:
            raise OutOfRangeError("bad length")
        if not 0 <= offset <= self._total:
            raise OutOfRangeError("insert beyond end")
        self.last_op_shifted = 0
        leaf, path = self._locate_for_mutation(offset)
        offs, lens, physl = leaf.offs, leaf.lens, leaf.phys
        idx = bisect_left(offs, offset)
        if idx > 0 and offs[idx - 1] + lens[idx - 1] > offset:
            d = offset - offs[idx - 1]
            tail = physl[idx - 1]
            if tail != UNMAPPED:
                tail += d
            offs.insert(idx, offset)
            lens.insert(idx, lens[idx - 1] - d)
            physl.insert(idx, tail)
            lens[idx - 1] = d
        offs.insert(idx, offset)
        lens.insert(idx, length)
        physl.insert(idx, phys)
        for j in range(idx + 1, len(offs)):
            offs[j] += length
        self.shifted_entries += len(offs) - idx - 1
        self.last_op_shifted += len(offs) - idx - 1
        self._shift_after_path(path, length)
        self._total += length

    def collapse_range(self, offset, length):
        if length == 0:
            return []
        if offset < 0 or offset + length > self._total:
            raise OutOfRangeError("collapse out of range")
        self.last_op_shifted = 0
        freed = []
        self._split_extent_at(offset + length)
        self._split_extent_at(offset)
        remaining = length
        while remaining > 0:
            leaf, path = self._locate(offset)
            offs, lens, physl = leaf.offs, leaf.lens, leaf.phys
            idx = bisect_left(offs, offset)
            taken = 0
            batch = 0
            while idx + taken < len(offs) and batch + lens[idx + taken] <= remaining:
                freed.append(Run(physl[idx + taken], lens[idx + taken]))
                batch += lens[idx + taken]
                taken += 1
            del offs[idx:idx + taken]
            del lens[idx:idx + taken]
            del physl[idx:idx + taken]
            for j in range(idx, len(offs)):
                offs[j] -= batch
            self.shifted_entries += len(offs) - idx
            self.last_op_shifted += len(offs) - idx
            self._shift_after_path(path, -batch)
            self._total -= batch
            remaining -= batch
            self._fix_underflow(leaf, path)
        return freed

    def write_range(self, offset, length, phys, coalesce=False):
        if offset < 0 or length <= 0:
            raise OutOfRangeError("bad write range")
        if offset > self._total:
            self.insert_range(self._total, offset - self._total, UNMAPPED)
        overlap = min(length, self._total - offset)
        replaced = self.collapse_range(offset, overlap) if overlap > 0 else []
        self.insert_range(offset, length, phys)
        return replaced

    def _split_extent_at(self, offset):
        if offset <= 0 or offset >= self._total:
            return
        leaf, _ = self._locate_for_mutation(offset)
        offs, lens, physl = leaf.offs, leaf.lens, leaf.phys
        idx = bisect_left(offs, offset)
        if idx < len(offs) and offs[idx] == offset:
            return
        d = offset - offs[idx - 1]
        tail = physl[idx - 1]
        if tail != UNMAPPED:
            tail += d
        offs.insert(idx, offset)
        lens.insert(idx, lens[idx - 1] - d)
        physl.insert(idx, tail)
        lens[idx - 1] = d

    def _merge_children(self, parent, li):
        ri = li + 1
        left = parent.children[li]
        right = parent.children[ri]
        if isinstance(left, _BInner):
            left.pivots.extend([parent.pivots[ri - 1]] + right.pivots)
            left.children.extend(right.children)
        else:
            left.offs.extend(right.offs)
            left.lens.extend(right.lens)
            left.phys.extend(right.phys)
        del parent.children[ri]
        del parent.pivots[ri - 1]

    def _fix_underflow(self, node, path):
        merge_cap = self._capacity // 2
        for parent, ci in reversed(path):
            size = self._node_size(node)
            if size == 0:
                del parent.children[ci]
                if parent.pivots:
                    del parent.pivots[ci - 1 if ci > 0 else 0]
            else:
                if ci > 0 and size + self._node_size(parent.children[ci - 1]) <= merge_cap:
                    self._merge_children(parent, ci - 1)
                elif ci + 1 < len(parent.children) and \
                        size + self._node_size(parent.children[ci + 1]) <= merge_cap:
                    self._merge_children(parent, ci)
            node = parent
        root = self._root
        while isinstance(root, _BInner):
            if len(root.children) == 0:
                root = _BLeaf()
                break
            if len(root.children) > 1:
                break
            root = root.children[0]
        self._root = root


class SortedArrayIndex:
    """Flat array of (offset, length, phys), offsets absolute."""

    def __init__(self):
        self.offs: list[int] = []
        self.lens: list[int] = []
        self.phys: list[int] = []
        self._total = 0
        self.shifted_entries = 0
        self.last_op_shifted = 0

    def total_size(self) -> int:
        return self._total

    def _split_at(self, offset):
        if offset <= 0 or offset >= self._total:
            return
        idx = bisect_left(self.offs, offset)
        if idx < len(self.offs) and self.offs[idx] == offset:
            return
        d = offset - self.offs[idx - 1]
        tail = self.phys[idx - 1]
        if tail != UNMAPPED:
            tail += d
        self.offs.insert(idx, offset)
        self.lens.insert(idx, self.lens[idx - 1] - d)
        self.phys.insert(idx, tail)
        self.lens[idx - 1] = d

    def insert_range(self, offset, length, phys=UNMAPPED, coalesce=False):
        if length <= 0:
            raise OutOfRangeError("bad length")
        if not 0 <= offset <= self._total:
            raise OutOfRangeError("insert beyond end")
        self.last_op_shifted = 0
        self._split_at(offset)
        idx = bisect_left(self.offs, offset)
        self.offs.insert(idx, offset)
        self.lens.insert(idx, length)
        self.phys.insert(idx, phys)
        for j in range(idx + 1, len(self.offs)):
            self.offs[j] += length
        self.shifted_entries += len(self.offs) - idx - 1
        self.last_op_shifted += len(self.offs) - idx - 1
        self._total += length

    def collapse_range(self, offset, length):
        if length == 0:
            return []
        if offset < 0 or offset + length > self._total:
            raise OutOfRangeError("collapse out of range")
        self.last_op_shifted = 0
        self._split_at(offset)
        self._split_at(offset + length)
        lo = bisect_left(self.offs, offset)
        hi = lo
        freed = []
        while hi < len(self.offs) and self.offs[hi] < offset + length:
            freed.append(Run(self.phys[hi], self.lens[hi]))
            hi += 1
        del self.offs[lo:hi]
        del self.lens[lo:hi]
        del self.phys[lo:hi]
        for j in range(lo, len(self.offs)):
            self.offs[j] -= length
        self.shifted_entries += len(self.offs) - lo
        self.last_op_shifted += len(self.offs) - lo
        self._total -= length
        return freed

    def write_range(self, offset, length, phys, coalesce=False):
        if offset < 0 or length <= 0:
            raise OutOfRangeError("bad write range")
        if offset > self._total:
            self.insert_range(self._total, offset - self._total, UNMAPPED)
        overlap = min(length, self._total - offset)
        replaced = self.collapse_range(offset, overlap) if overlap > 0 else []
        self.insert_range(offset, length, phys)
        return replaced

    def query_range(self, offset, length):
        if length == 0:
            return []
        if offset < 0 or offset + length > self._total:
            raise OutOfRangeError("query out of range")
        idx = max(0, bisect_right(self.offs, offset) - 1)
        runs = []
        pos = offset
        end = offset + length
        while pos < end:
            skip = pos - self.offs[idx]
            n = min(self.lens[idx] - skip, end - pos)
            p = self.phys[idx]
            runs.append(Run(p if p == UNMAPPED else p + skip, n))
            pos += n
            idx += 1
        return runs

    def find_extent(self, offset):
        if not 0 <= offset < self._total:
            raise OutOfRangeError("offset out of range")
        idx = max(0, bisect_right(self.offs, offset) - 1)
        return self.offs[idx], self.phys[idx], self.lens[idx]

    def extents(self, offset: int = 0):
        if self._total == 0 or offset >= self._total:
            return
        idx = max(0, bisect_right(self.offs, offset) - 1)
        for j in range(idx, len(self.offs)):
            yield Extent(self.offs[j], self.lens[j], self.phys[j])
