"""Unit tests for the KV store: API, intervals, cache, WAL, recovery."""

import pytest

from flexstore.flexdb import (
    CachedInterval,
    DBConfig,
    FlexDB,
    IntervalEntry,
    MemTable,
    TOMBSTONE,
    decode_record,
    decode_varint,
    encode_record,
    encode_varint,
)
from flexstore.flexspace import SpaceConfig
from flexstore.storage import CrashSimStorage


def db_config(**kw):
    space = SpaceConfig(segment_size=1 << 16, max_extent=1 << 11,
                        reserved_free_segments=4, log_size_threshold=1 << 20)
    base = dict(memtable_cap=1 << 12, cache_capacity=64, space=space)
    base.update(kw)
    return DBConfig(**base)


def new_db(**kw):
    return FlexDB.create(storage=CrashSimStorage(), config=db_config(**kw))


def reopened(db):
    db.flush()
    db.space.barrier()
    images = {name: bytes(f.current) for name, f in db.storage._files.items()}
    return FlexDB.open(storage=CrashSimStorage.from_images(images),
                       config=db_config())


class TestVarint:
    @pytest.mark.parametrize("n", [0, 1, 127, 128, 300, 1 << 20, (1 << 35) + 7])
    def test_roundtrip(self, n):
        buf = encode_varint(n)
        val, pos = decode_varint(buf, 0)
        assert (val, pos) == (n, len(buf))

    def test_record_roundtrip(self):
        rec = encode_record(b"cat", b"abcd")
        assert len(rec) == 9  # 1 + 1 + 3 + 4
        key, value, pos = decode_record(rec, 0)
        assert (key, value, pos) == (b"cat", b"abcd", 9)


class TestMemTable:
    def test_put_get_delete(self):
        mt = MemTable()
        mt.put(b"a", b"1")
        assert mt.get(b"a") == b"1"
        mt.put(b"a", TOMBSTONE)
        assert mt.get(b"a") is TOMBSTONE
        assert mt.get(b"b") is None

    def test_items_sorted(self):
        mt = MemTable()
        for k in (b"m", b"a", b"z", b"k"):
            mt.put(k, k)
        assert [k for k, _ in mt.items()] == [b"a", b"k", b"m", b"z"]


class TestBasicOps:
    def test_put_get(self):
        db = new_db()
        db.put(b"a", b"1")
        assert db.get(b"a") == b"1"

    def test_delete(self):
        db = new_db()
        db.put(b"a", b"1")
        db.delete(b"a")
        assert db.get(b"a") is None

    def test_get_on_empty_store(self):
        db = new_db()
        assert db.get(b"nothing") is None

    def test_persisted_put_get(self):
        db = new_db()
        db.put(b"a", b"1")
        db.flush()
        assert db.get(b"a") == b"1"
        db.check_intervals()

    def test_overwrite_same_size_in_place(self):
        db = new_db()
        db.put(b"key", b"val1")
        db.flush()
        db.put(b"key", b"val2")
        db.flush()
        assert db.get(b"key") == b"val2"
        assert [k for k, _ in db.decode_everything()] == [b"key"]

    def test_overwrite_resize(self):
        db = new_db()
        db.put(b"key", b"short")
        db.flush()
        db.put(b"key", b"a considerably longer value")
        db.flush()
        assert db.get(b"key") == b"a considerably longer value"
        db.check_intervals()

    def test_delete_persisted_key_collapses(self):
        db = new_db()
        db.put(b"a", b"1")
        db.put(b"b", b"2")
        db.flush()
        db.delete(b"a")
        db.flush()
        assert db.get(b"a") is None
        assert db.get(b"b") == b"2"
        assert [k for k, _ in db.decode_everything()] == [b"b"]

    def test_delete_absent_key_noop(self):
        db = new_db()
        db.put(b"a", b"1")
        db.delete(b"zzz")
        db.flush()
        assert db.get(b"a") == b"1"

    def test_empty_value(self):
        db = new_db()
        db.put(b"a", b"")
        db.flush()
        assert db.get(b"a") == b""


class TestScan:
    def test_seek_then_next(self):
        db = new_db()
        for k in (b"a", b"b", b"c"):
            db.put(k, k.upper())
        it = db.seek(b"b")
        assert next(it) == (b"b", b"B")
        assert next(it) == (b"c", b"C")
        with pytest.raises(StopIteration):
            next(it)

    def test_seek_past_end(self):
        db = new_db()
        db.put(b"a", b"1")
        assert list(db.seek(b"x")) == []

    def test_scan_merges_memtable_and_space(self):
        db = new_db()
        db.put(b"a", b"old")
        db.put(b"c", b"C")
        db.flush()
        db.put(b"a", b"new")
        db.put(b"b", b"B")
        db.delete(b"c")
        assert list(db.scan(b"")) == [(b"a", b"new"), (b"b", b"B")]

    def test_scan_limit(self):
        db = new_db()
        for i in range(20):
            db.put(f"k{i:03d}".encode(), b"v")
        assert len(list(db.scan(b"", limit=5))) == 5


def fig_sparse_index_db():
    """Store whose sparse index matches the worked four-interval layout:
    intervals at effective offsets 0, 42, 64, 90 keyed None, bit, foo, pin."""
    db = new_db()
    records = [
        (b"and", b"A" * 16), (b"ant", b"B" * 16),   # [0, 42)
        (b"bit", b"C" * 6), (b"far", b"D" * 6),     # [42, 64)
        (b"foo", b"E" * 8), (b"kit", b"F" * 8),     # [64, 90)
        (b"pin", b"G" * 7), (b"zoo", b"H" * 7),     # [90, 114)
    ]
    blob = b"".join(encode_record(k, v) for k, v in records)
    db.space.insert_range(0, blob)
    e1 = IntervalEntry(None, 0, 42, 2)
    e2 = IntervalEntry(b"bit", 0, 22, 2)
    e3 = IntervalEntry(b"foo", 0, 26, 2)
    e4 = IntervalEntry(b"pin", 0, 24, 2)
    db.index.insert_first(e1)
    db.index.insert_entry(e2, 42)
    db.index.insert_entry(e3, 64)
    db.index.insert_entry(e4, 90)
    return db, records


class TestSparseIndexWorkedExample:
    def test_search_kit_resolves_to_third_interval_at_64(self):
        db, _ = fig_sparse_index_db()
        leaf, idx, path, eff = db.index.find(b"kit")
        entry = leaf.entries[idx]
        assert entry.ikey == b"foo"
        assert eff == 64
        assert db.get(b"kit") == b"F" * 8

    def test_commit_cat_shifts_last_two_intervals_by_9(self):
        db, _ = fig_sparse_index_db()
        before = {(e.ikey or b""): off for e, off in db.index.walk()}
        assert before == {b"": 0, b"bit": 42, b"foo": 64, b"pin": 90}
        db.put(b"cat", b"abcd")  # encodes to 9 bytes
        db.flush()
        after = {(e.ikey or b""): off for e, off in db.index.walk()}
        assert after == {b"": 0, b"bit": 42, b"foo": 73, b"pin": 99}
        db.check_intervals()
        assert db.get(b"cat") == b"abcd"
        keys = [k for k, _ in db.decode_everything()]
        assert keys == sorted(keys)

    def test_search_below_first_key_lands_in_first_interval(self):
        db, _ = fig_sparse_index_db()
        leaf, idx, path, eff = db.index.find(b"aaa")
        assert leaf.entries[idx].ikey is None
        assert eff == 0


class TestIntervalMaintenance:
    def test_split_at_item_threshold(self):
        db = new_db()
        for i in range(40):
            db.put(f"k{i:04d}".encode(), b"x" * 8)
        db.flush()
        assert db.index.count > 1
        for entry, _ in db.index.walk():
            assert entry.count <= db.config.interval_split_count
        db.check_intervals()

    def test_merge_after_deletions(self):
        db = new_db()
        for i in range(40):
            db.put(f"k{i:04d}".encode(), b"x" * 8)
        db.flush()
        split_count = db.index.count
        assert split_count > 1
        for i in range(40):
            db.delete(f"k{i:04d}".encode())
        db.flush()
        assert db.index.count <= 1
        assert db.space.size == 0

    def test_interval_bytes_threshold(self):
        db = new_db()
        for i in range(10):
            db.put(f"big{i}".encode(), b"z" * 4000)
        db.flush()
        for entry, _ in db.index.walk():
            assert entry.size <= db.config.interval_split_bytes + 4100
        db.check_intervals()


class TestFragmentation:
    def test_contiguous_interval_not_fragmented(self):
        db = new_db()
        recs = [(f"k{i}".encode(), b"v" * 4) for i in range(4)]
        db.space.insert_range(0, b"".join(encode_record(k, v) for k, v in recs))
        entry = IntervalEntry(None, 0, db.space.size, 4)
        db.index.insert_first(entry)
        db._ensure_loaded(entry, 0)
        assert entry.fragmented is False  # 1 extent <= 4/2

    def test_scattered_interval_flagged_fragmented(self):
        db = new_db()
        rec = lambda k, v: encode_record(k, v)
        db.space.insert_range(0, rec(b"d", b"4" * 4))
        db.space.insert_range(0, rec(b"c", b"3" * 4))
        db.space.insert_range(0, rec(b"a", b"1" * 4) + rec(b"b", b"2" * 4))
        assert len(db.space.tree.query_range(0, db.space.size)) == 3
        entry = IntervalEntry(None, 0, db.space.size, 4)
        db.index.insert_first(entry)
        db._ensure_loaded(entry, 0)
        assert entry.fragmented is True  # 3 extents > 4/2

    def test_fragmented_interval_defragmented_on_update(self):
        db = new_db()
        rec = lambda k, v: encode_record(k, v)
        db.space.insert_range(0, rec(b"d", b"4" * 4))
        db.space.insert_range(0, rec(b"c", b"3" * 4))
        db.space.insert_range(0, rec(b"a", b"1" * 4) + rec(b"b", b"2" * 4))
        entry = IntervalEntry(None, 0, db.space.size, 4)
        db.index.insert_first(entry)
        db.put(b"b", b"9" * 4)
        db.flush()
        found = db.index.find(b"b")
        assert found[0].entries[found[1]].fragmented is False
        assert db.get(b"d") == b"4" * 4
        db.check_intervals()


class TestClockCache:
    def test_eviction_bounded_and_write_through(self):
        db = new_db(cache_capacity=2, interval_split_count=4)
        for i in range(40):
            db.put(f"k{i:04d}".encode(), b"v" * 8)
        db.flush()
        assert db.index.count >= 3
        # Round-robin point reads across all intervals.
        for _ in range(3):
            for i in range(0, 40, 7):
                assert db.get(f"k{i:04d}".encode()) == b"v" * 8
        assert len(db.cache) <= 2
        db.check_intervals()

    def test_hit_rate_counted(self):
        db = new_db()
        db.put(b"a", b"1")
        db.flush()
        db.get(b"a")
        db.get(b"a")
        st = db.stats()
        assert st["cache_hits"] >= 1


class TestWalAndRecovery:
    def test_reopen_preserves_everything(self):
        db = new_db()
        for i in range(100):
            db.put(f"key{i:05d}".encode(), f"value{i}".encode() * 3)
        for i in range(0, 100, 7):
            db.delete(f"key{i:05d}".encode())
        db2 = reopened(db)
        for i in range(100):
            expect = None if i % 7 == 0 else f"value{i}".encode() * 3
            assert db2.get(f"key{i:05d}".encode()) == expect
        db2.check_intervals()

    def test_unflushed_put_survives_via_wal_sync(self):
        db = new_db(wal_sync_every_op=True)
        db.put(b"committed", b"1")
        db.flush()
        db.put(b"pending", b"2")  # in WAL + memtable only
        images = {n: bytes(f.durable) for n, f in db.storage._files.items()}
        db2 = FlexDB.open(storage=CrashSimStorage.from_images(images),
                          config=db_config())
        assert db2.get(b"committed") == b"1"
        assert db2.get(b"pending") == b"2"

    def test_unsynced_put_lost_without_wal_sync(self):
        db = new_db(wal_sync_every_op=False)
        db.put(b"committed", b"1")
        db.flush()
        db.put(b"pending", b"2")
        images = {n: bytes(f.durable) for n, f in db.storage._files.items()}
        db2 = FlexDB.open(storage=CrashSimStorage.from_images(images),
                          config=db_config())
        assert db2.get(b"committed") == b"1"
        assert db2.get(b"pending") is None

    def test_recovered_interval_boundaries_are_record_boundaries(self):
        db = new_db(recovery_stride=256)
        for i in range(120):
            db.put(f"key{i:05d}".encode(), b"v" * 24)
        db2 = reopened(db)
        assert db2.recovery_probes > 2
        records = db2.decode_everything()
        starts = {0}
        pos = 0
        for k, v in records:
            pos += len(encode_record(k, v))
            starts.add(pos)
        by_key = dict(records)
        for n, (entry, eff) in enumerate(db2.index.walk()):
            assert eff in starts, f"interval {n} does not start at a record"
            if n > 0:
                assert entry.ikey in by_key
        db2.check_intervals()

    def test_oversized_recovered_interval_splits_on_update(self):
        db = new_db(recovery_stride=1 << 14)
        for i in range(60):
            db.put(f"key{i:05d}".encode(), b"v" * 24)
        db2 = reopened(db)
        before = db2.index.count
        assert before < 5  # coarse stride: few big intervals
        # Splitting is lazy: updating a key splits the interval it hits.
        for i in (1, 30, 59):
            db2.put(f"key{i:05d}".encode(), b"w" * 24)
        db2.flush()
        assert db2.index.count > before
        for i in (1, 30, 59):
            found = db2.index.find(f"key{i:05d}".encode())
            entry = found[0].entries[found[1]]
            assert entry.count <= db2.config.interval_split_count
        db2.check_intervals()


class TestBackgroundCommitter:
    def test_background_thread_commits(self):
        db = new_db(background_commit=True, memtable_cap=1 << 10)
        for i in range(300):
            db.put(f"k{i:04d}".encode(), b"w" * 16)
        db.flush()
        assert db.imm is None
        for i in range(0, 300, 13):
            assert db.get(f"k{i:04d}".encode()) == b"w" * 16
        db.close()
