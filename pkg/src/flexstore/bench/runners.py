"""Benchmark and crash-suite drivers.

Throughput comparisons are always taken between structures measured in
the same process and reported as ratios by the caller; absolute numbers
are hardware-dependent and only logged.  Content checks run against
independent in-memory models, and a model mismatch is fatal.
"""

from __future__ import annotations

import random
import tempfile
import time
from bisect import bisect_left
from zlib import crc32

from ..flexdb import DBConfig, FlexDB
from ..flexspace import FlexSpace, SpaceConfig
from ..flextree import FlexTree
from ..storage import CrashPoint, CrashSimStorage, DiskStorage
from .baseline import BaselineBPlusTree, SortedArrayIndex
from .report import BenchReport, latency_summary
from .workload import KeyChooser, WorkloadSpec, make_key

INDEX_KINDS = ("flextree", "btree", "array")
INDEX_OPS = ("insert", "append", "lookup", "range-query")

# Measured-op defaults; the O(N) baselines get few shots because a
# single random insert at a million extents rewrites half the index.
MEASURE_DEFAULTS = {
    ("flextree", "insert"): 2000,
    ("btree", "insert"): 25,
    ("array", "insert"): 200,
    ("flextree", "lookup"): 20000,
    ("btree", "lookup"): 20000,
    ("array", "lookup"): 20000,
    ("flextree", "range-query"): 1000,
    ("btree", "range-query"): 1000,
    ("array", "range-query"): 1000,
}

RANGE_QUERY_EXTENTS = 50


def make_index(kind: str):
    if kind == "flextree":
        return FlexTree()
    if kind == "btree":
        return BaselineBPlusTree()
    if kind == "array":
        return SortedArrayIndex()
    raise ValueError(f"unknown index kind {kind!r}")


def _prepopulate(index, count: int, extent_len: int) -> None:
    insert = index.insert_range
    total = 0
    # Non-adjacent physical addresses so nothing coalesces.
    step = extent_len + 1
    for i in range(count):
        insert(total, extent_len, i * step)
        total += extent_len


def run_index_bench(index_kind: str, op_kind: str, extent_count: int,
                    measure: int | None = None, seed: int = 0,
                    extent_len: int = 4096) -> BenchReport:
    if extent_count < 1:
        raise ValueError("extent count must be positive")
    if op_kind not in INDEX_OPS:
        raise ValueError(f"unknown op {op_kind!r}")
    rng = random.Random(seed)
    index = make_index(index_kind)
    report = BenchReport(
        "index-bench",
        params={"index": index_kind, "op": op_kind, "extents": extent_count,
                "extent_len": extent_len, "seed": seed})
    if measure is None:
        measure = MEASURE_DEFAULTS.get((index_kind, op_kind), 1000)

    if op_kind == "append":
        half = extent_count // 2
        step = extent_len + 1
        t0 = time.perf_counter()
        total = 0
        for i in range(half):
            index.insert_range(total, extent_len, i * step)
            total += extent_len
        t1 = time.perf_counter()
        for i in range(half, extent_count):
            index.insert_range(total, extent_len, i * step)
            total += extent_len
        t2 = time.perf_counter()
        report.add_phase("build_front_half", half, t1 - t0)
        phase = report.add_phase("append_steady_state", extent_count - half, t2 - t1)
        report.metrics["throughput_ops_per_sec"] = phase.throughput
        return report

    build_t0 = time.perf_counter()
    _prepopulate(index, extent_count, extent_len)
    build_secs = time.perf_counter() - build_t0
    report.add_phase("prepopulate_appends", extent_count, build_secs)

    if op_kind == "insert":
        if index_kind == "flextree":
            index.reset_op_stats()
        else:
            index.shifted_entries = 0
        fresh_phys = (extent_count + 1) * (extent_len + 1)
        t0 = time.perf_counter()
        for i in range(measure):
            offset = rng.randrange(index.total_size() + 1)
            index.insert_range(offset, extent_len, fresh_phys)
            fresh_phys += extent_len + 1
        secs = time.perf_counter() - t0
        counters = {}
        if index_kind == "flextree":
            counters["mean_dirtied_nodes"] = index.dirtied_node_total / measure
        else:
            counters["mean_shifted_entries"] = index.shifted_entries / measure
        phase = report.add_phase("random_insert", measure, secs, **counters)
    elif op_kind == "lookup":
        size = index.total_size()
        t0 = time.perf_counter()
        for _ in range(measure):
            index.find_extent(rng.randrange(size))
        secs = time.perf_counter() - t0
        phase = report.add_phase("random_lookup", measure, secs)
    else:  # range-query
        size = index.total_size()
        span = RANGE_QUERY_EXTENTS
        t0 = time.perf_counter()
        got = 0
        for _ in range(measure):
            offset = rng.randrange(size)
            n = 0
            for _ext in index.extents(offset):
                n += 1
                if n >= span:
                    break
            got += n
        secs = time.perf_counter() - t0
        phase = report.add_phase("range_query_50", measure, secs,
                                 extents_walked=got)
    report.metrics["throughput_ops_per_sec"] = phase.throughput
    for key, value in phase.counters.items():
        report.metrics[key] = value
    return report


# ----------------------------------------------------------------------
# space I/O bench


def _block_payload(i: int, io_size: int) -> bytes:
    return (i.to_bytes(8, "little") * ((io_size + 7) // 8))[:io_size]


def run_space_bench(pattern: str, io_size: int, blocks: int,
                    directory: str | None = None, storage=None,
                    config: SpaceConfig | None = None,
                    seed: int = 0) -> BenchReport:
    if pattern not in ("rand-insert", "rand-write", "seq-write"):
        raise ValueError(f"unknown pattern {pattern!r}")
    if io_size % 8:
        raise ValueError("io size must be a multiple of 8")
    storage = storage or DiskStorage(
        directory or tempfile.mkdtemp(prefix="flexspace-bench-"))
    space = FlexSpace.create(storage=storage, config=config or SpaceConfig())
    rng = random.Random(seed)
    report = BenchReport(
        "space-bench",
        params={"pattern": pattern, "io_size": io_size, "blocks": blocks,
                "seed": seed, "segment_size": space.config.segment_size})

    layout: list = []
    t0 = time.perf_counter()
    if pattern == "seq-write":
        for i in range(blocks):
            space.pwrite(i * io_size, _block_payload(i, io_size))
            layout.append(i)
    elif pattern == "rand-write":
        order = list(range(blocks))
        rng.shuffle(order)
        layout = [0] * blocks
        for i, b in enumerate(order):
            space.pwrite(b * io_size, _block_payload(i, io_size))
            layout[b] = i
    else:  # rand-insert
        for i in range(blocks):
            at = rng.randint(0, i)
            space.insert_range(at * io_size, _block_payload(i, io_size))
            layout.insert(at, i)
    space.barrier()
    write_secs = time.perf_counter() - t0
    report.add_phase("write", blocks, write_secs,
                     bytes_logical=blocks * io_size)

    t0 = time.perf_counter()
    for j in range(blocks):
        got = space.pread(j * io_size, io_size)
        if got != _block_payload(layout[j], io_size):
            raise RuntimeError(f"content mismatch at block {j} (sequential read)")
    seq_read_secs = time.perf_counter() - t0
    report.add_phase("sequential_read", blocks, seq_read_secs)

    order = list(range(blocks))
    rng.shuffle(order)
    t0 = time.perf_counter()
    for j in order:
        got = space.pread(j * io_size, io_size)
        if got != _block_payload(layout[j], io_size):
            raise RuntimeError(f"content mismatch at block {j} (random read)")
    rand_read_secs = time.perf_counter() - t0
    report.add_phase("random_read", blocks, rand_read_secs)

    space.close()
    logical = blocks * io_size
    report.metrics["bytes_written_file_layer"] = storage.bytes_written
    report.metrics["bytes_logical"] = logical
    report.metrics["write_amplification"] = storage.bytes_written / logical
    report.metrics["content_verified"] = 1
    return report


# ----------------------------------------------------------------------
# KV bench


def _kv_value(rng: random.Random, key: bytes, value_size: int) -> bytes:
    # Key-bound prefix so concurrent readers can validate integrity.
    prefix = crc32(key).to_bytes(4, "little")
    body = rng.randbytes(max(0, value_size - 4))
    return (prefix + body)[:max(4, value_size)]


def run_kv_bench(spec: WorkloadSpec, directory: str | None = None,
                 storage=None, db_config: DBConfig | None = None) -> BenchReport:
    storage = storage or DiskStorage(
        directory or tempfile.mkdtemp(prefix="flexdb-bench-"))
    db = FlexDB.create(storage=storage, config=db_config or DBConfig())
    report = BenchReport("kv-bench", params=spec.params())
    rng = random.Random(spec.seed)
    chooser = KeyChooser(spec)
    model: dict[bytes, bytes] = {}
    keys: list[bytes] = []

    t0 = time.perf_counter()
    for i in range(spec.key_count):
        key = make_key(i, spec.key_size)
        value = _kv_value(rng, key, spec.value_size)
        db.put(key, value)
        model[key] = value
        keys.append(key)
    db.flush()
    load_secs = time.perf_counter() - t0
    report.add_phase("load", spec.key_count, load_secs,
                     bytes_logical=sum(len(k) + len(v) for k, v in model.items()))

    mix = sorted(spec.mix.items())
    thresholds = []
    acc = 0.0
    for name, frac in mix:
        acc += frac
        thresholds.append((acc, name))

    def pick_op(r: float) -> str:
        for limit, name in thresholds:
            if r < limit:
                return name
        return thresholds[-1][1]

    latencies: dict[str, list] = {name: [] for _, name in thresholds}
    checked = 0
    t0 = time.perf_counter()
    for _ in range(spec.op_count):
        op = pick_op(rng.random())
        t_op = time.perf_counter_ns()
        if op == "read":
            key = keys[chooser.next_index(rng)]
            got = db.get(key)
            if got != model.get(key):
                raise RuntimeError(f"model mismatch on read of {key!r}")
            checked += 1
        elif op == "update":
            key = keys[chooser.next_index(rng)]
            value = _kv_value(rng, key, spec.value_size)
            db.put(key, value)
            model[key] = value
        elif op == "insert":
            idx = chooser.new_index()
            key = make_key(idx, spec.key_size)
            value = _kv_value(rng, key, spec.value_size)
            db.put(key, value)
            model[key] = value
            keys.append(key)
        elif op == "scan":
            key = keys[chooser.next_index(rng)]
            got = list(db.scan(key, limit=spec.scan_length))
            lo = bisect_left(keys, key)
            expect = [(k, model[k]) for k in keys[lo:lo + spec.scan_length]]
            if got != expect:
                raise RuntimeError(f"model mismatch on scan from {key!r}")
            checked += 1
        else:  # rmw
            key = keys[chooser.next_index(rng)]
            got = db.get(key)
            if got != model.get(key):
                raise RuntimeError(f"model mismatch on read-modify-write of {key!r}")
            checked += 1
            value = _kv_value(rng, key, spec.value_size)
            db.put(key, value)
            model[key] = value
        latencies[op].append(time.perf_counter_ns() - t_op)
    db.flush()
    run_secs = time.perf_counter() - t0
    counters = {}
    for name, samples in latencies.items():
        for metric, value in latency_summary(samples).items():
            counters[f"{name}_{metric}"] = value
        counters[f"{name}_ops"] = len(samples)
    report.add_phase("run", spec.op_count, run_secs, **counters)

    for key, value in ((k, model[k]) for k in rng.sample(keys, min(500, len(keys)))):
        if db.get(key) != value:
            raise RuntimeError(f"model mismatch in final verification of {key!r}")
    st = db.stats()
    report.metrics["reads_verified"] = checked
    report.metrics["mismatches"] = 0
    report.metrics["bytes_written_file_layer"] = st["space"]["bytes_written"]
    report.metrics["bytes_logical"] = st["space"]["logical_bytes"]
    report.metrics["write_amplification"] = (
        st["space"]["bytes_written"] / max(1, st["space"]["logical_bytes"]))
    report.metrics["intervals"] = st["intervals"]
    report.metrics["cache_hit_rate"] = st["cache_hit_rate"]
    db.close()
    return report


# ----------------------------------------------------------------------
# crash suite


def _crash_script(seed: int, nops: int):
    """Deterministic mixed script over one raw space and one KV store."""
    rng = random.Random(seed)
    ops = []
    sp_size = 0
    keyspace = 400
    for _ in range(nops):
        roll = rng.random()
        if roll < 0.45:
            which = "db"
            r2 = rng.random()
            key = make_key(rng.randrange(keyspace), 12)
            if r2 < 0.70:
                ops.append(("db", "put", key, rng.randbytes(rng.randint(1, 48))))
            elif r2 < 0.90:
                ops.append(("db", "delete", key, b""))
            else:
                ops.append(("db", "flush", b"", b""))
        else:
            r2 = rng.random()
            if r2 < 0.40 or sp_size < 64:
                data = rng.randbytes(rng.randint(1, 160))
                ops.append(("sp", "insert", rng.randint(0, sp_size), data))
                sp_size += len(data)
            elif r2 < 0.62:
                data = rng.randbytes(rng.randint(1, 160))
                off = rng.randint(0, sp_size + 64)
                ops.append(("sp", "pwrite", off, data))
                sp_size = max(sp_size, off + len(data))
            elif r2 < 0.80:
                ln = rng.randint(1, min(160, sp_size))
                ops.append(("sp", "collapse", rng.randint(0, sp_size - ln), ln))
                sp_size -= ln
            elif r2 < 0.94:
                ops.append(("sp", "barrier", 0, b""))
            else:
                ops.append(("sp", "checkpoint", 0, b""))
    ops.append(("sp", "barrier", 0, b""))
    ops.append(("db", "flush", b"", b""))
    return ops


class _CrashRun:
    """One scripted run over fresh simulated stores."""

    def __init__(self, seed: int):
        self.sp_storage = CrashSimStorage()
        self.db_storage = CrashSimStorage()
        space_cfg = SpaceConfig(segment_size=1 << 16, max_extent=1 << 11,
                                reserved_free_segments=4,
                                log_size_threshold=1 << 18)
        db_space = SpaceConfig(segment_size=1 << 16, max_extent=1 << 11,
                               reserved_free_segments=4,
                               log_size_threshold=1 << 18)
        self.space = FlexSpace.create(storage=self.sp_storage, config=space_cfg)
        self.db = FlexDB.create(
            storage=self.db_storage,
            config=DBConfig(memtable_cap=1 << 12, cache_capacity=32,
                            wal_sync_every_op=True, space=db_space))
        self.space_committed = b""
        self.space.commit_listener = self._on_space_commit
        self.db_model: dict[bytes, bytes] = {}
        self.db_prev: dict[bytes, bytes] = {}

    def _on_space_commit(self):
        size = self.space.tree.total_size()
        parts = []
        for phys, n in (self.space.tree.query_range(0, size) if size else ()):
            parts.append(bytes(n) if phys == (1 << 48) - 1
                         else self.space._read_phys(phys, n))
        self.space_committed = b"".join(parts)

    def apply(self, op):
        target, kind, a, b = op
        if target == "sp":
            if kind == "insert":
                self.space.insert_range(a, b)
            elif kind == "pwrite":
                self.space.pwrite(a, b)
            elif kind == "collapse":
                self.space.collapse_range(a, b)
            elif kind == "barrier":
                self.space.barrier()
            else:
                self.space.checkpoint()
        else:
            self.db_prev = dict(self.db_model)
            if kind == "put":
                self.db.put(a, b)
                self.db_model[a] = b
            elif kind == "delete":
                self.db.delete(a)
                self.db_model.pop(a, None)
            else:
                self.db.flush()

    def run(self, ops, arm_target=None, arm_at=None):
        if arm_target == "sp":
            self.sp_storage.arm(arm_at)
        elif arm_target == "db":
            self.db_storage.arm(arm_at)
        try:
            for op in ops:
                self.apply(op)
        except CrashPoint:
            return True
        finally:
            self.sp_storage.disarm()
            self.db_storage.disarm()
        return False


def run_crash_suite(seed: int = 0, injections: int = 200,
                    ops: int = 5000) -> BenchReport:
    script = _crash_script(seed, ops)
    report = BenchReport("crash-suite",
                         params={"seed": seed, "injections": injections,
                                 "ops": ops})
    probe = _CrashRun(seed)
    sp_setup = probe.sp_storage.write_ops
    db_setup = probe.db_storage.write_ops
    t0 = time.perf_counter()
    assert not probe.run(script)
    sp_events = probe.sp_storage.write_ops - sp_setup
    db_events = probe.db_storage.write_ops - db_setup
    rng = random.Random(seed ^ 0x5EED)
    points = []
    for _ in range(injections):
        if rng.random() < sp_events / max(1, sp_events + db_events):
            points.append(("sp", rng.randint(1, sp_events)))
        else:
            points.append(("db", rng.randint(1, db_events)))

    passed = 0
    failures = []
    for target, at in points:
        run = _CrashRun(seed)
        fired = run.run(script, arm_target=target, arm_at=at)
        if not fired:
            failures.append(f"{target}@{at}: injection never fired")
            continue
        img_rng = random.Random((at << 8) ^ seed)
        sp_images = run.sp_storage.crash_images(img_rng)
        db_images = run.db_storage.crash_images(img_rng)
        try:
            space2 = FlexSpace.open(storage=CrashSimStorage.from_images(sp_images))
            got_sp = space2.pread(0, space2.size)
            if got_sp != run.space_committed:
                failures.append(
                    f"{target}@{at}: space content diverged "
                    f"({len(got_sp)}B vs {len(run.space_committed)}B)")
                continue
            db2 = FlexDB.open(storage=CrashSimStorage.from_images(db_images))
            got_db = dict(db2.scan(b""))
            if got_db != run.db_model and got_db != run.db_prev:
                failures.append(f"{target}@{at}: db state diverged")
                continue
        except Exception as exc:  # any recovery error is a failure
            failures.append(f"{target}@{at}: recovery raised {exc!r}")
            continue
        passed += 1
    secs = time.perf_counter() - t0
    report.add_phase("injections", len(points), secs)
    report.metrics["write_events_space"] = sp_events
    report.metrics["write_events_db"] = db_events
    report.metrics["passed"] = passed
    report.metrics["failed"] = len(points) - passed
    for i, f in enumerate(failures[:5]):
        report.metrics[f"failure_{i}"] = f
    return report
