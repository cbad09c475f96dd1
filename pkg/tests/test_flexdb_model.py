"""Randomized flexdb workloads checked against an ordered-map model."""

import random
import threading

import pytest

from flexstore.flexdb import DBConfig, FlexDB
from flexstore.flexspace import SpaceConfig
from flexstore.storage import CrashSimStorage


def model_config(**kw):
    space = SpaceConfig(segment_size=1 << 16, max_extent=1 << 11,
                        reserved_free_segments=4, log_size_threshold=1 << 20)
    base = dict(memtable_cap=1 << 13, cache_capacity=32, space=space)
    base.update(kw)
    return DBConfig(**base)


def full_scan(db):
    return list(db.scan(b""))


def model_items(model):
    return sorted(model.items())


def rand_key(rng, hot=200):
    return f"key{rng.randint(0, hot):06d}".encode()


@pytest.mark.parametrize("seed", [1, 2])
def test_random_puts_deletes_match_model(seed):
    rng = random.Random(seed)
    db = FlexDB.create(storage=CrashSimStorage(), config=model_config())
    model = {}
    for i in range(4000):
        key = rand_key(rng)
        if rng.random() < 0.75:
            value = rng.randbytes(rng.randint(0, 60))
            db.put(key, value)
            model[key] = value
        else:
            db.delete(key)
            model.pop(key, None)
        if i % 500 == 499:
            probe = rand_key(rng)
            assert db.get(probe) == model.get(probe)
        if i % 1500 == 1499:
            db.flush()
            assert full_scan(db) == model_items(model)
            db.check_intervals()
    db.flush()
    assert full_scan(db) == model_items(model)
    db.check_intervals()
    keys = [k for k, _ in db.decode_everything()]
    assert keys == sorted(set(keys)), "persisted keys must be unique and sorted"


def test_point_reads_match_model_after_mixed_workload():
    rng = random.Random(7)
    db = FlexDB.create(storage=CrashSimStorage(), config=model_config())
    model = {}
    for _ in range(3000):
        key = rand_key(rng, hot=500)
        value = rng.randbytes(rng.randint(1, 40))
        db.put(key, value)
        model[key] = value
    db.flush()
    for i in range(501):
        key = f"key{i:06d}".encode()
        assert db.get(key) == model.get(key)


def test_range_scans_match_model_slices():
    rng = random.Random(11)
    db = FlexDB.create(storage=CrashSimStorage(), config=model_config())
    model = {}
    for _ in range(2500):
        key = rand_key(rng, hot=400)
        if rng.random() < 0.8:
            value = rng.randbytes(rng.randint(1, 30))
            db.put(key, value)
            model[key] = value
        else:
            db.delete(key)
            model.pop(key, None)
    db.flush()
    items = model_items(model)
    for _ in range(300):
        start = rand_key(rng, hot=420)
        want_n = rng.randint(1, 50)
        got = list(db.scan(start, limit=want_n))
        expect = [(k, v) for k, v in items if k >= start][:want_n]
        assert got == expect


def test_reopen_matches_model():
    rng = random.Random(13)
    storage = CrashSimStorage()
    db = FlexDB.create(storage=storage, config=model_config())
    model = {}
    for _ in range(2000):
        key = rand_key(rng, hot=300)
        if rng.random() < 0.8:
            value = rng.randbytes(rng.randint(1, 50))
            db.put(key, value)
            model[key] = value
        else:
            db.delete(key)
            model.pop(key, None)
    db.flush()
    db.space.barrier()
    images = {n: bytes(f.current) for n, f in storage._files.items()}
    db2 = FlexDB.open(storage=CrashSimStorage.from_images(images),
                      config=model_config())
    assert full_scan(db2) == model_items(model)
    db2.check_intervals()


def test_concurrent_readers_with_single_writer():
    # One writer mutates; readers must always observe either the old or
    # the new value of a key, never garbage.
    db = FlexDB.create(storage=CrashSimStorage(),
                       config=model_config(background_commit=True,
                                           memtable_cap=1 << 10))
    n_keys = 50
    rounds = 40
    for i in range(n_keys):
        db.put(f"k{i:03d}".encode(), b"round0000")
    errors = []
    stop = threading.Event()

    def reader():
        rng = random.Random(threading.get_ident())
        while not stop.is_set():
            i = rng.randrange(n_keys)
            v = db.get(f"k{i:03d}".encode())
            if v is not None and not v.startswith(b"round"):
                errors.append(v)

    threads = [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for r in range(1, rounds + 1):
        for i in range(n_keys):
            db.put(f"k{i:03d}".encode(), b"round%04d" % r)
    stop.set()
    for t in threads:
        t.join()
    assert not errors
    db.flush()
    assert db.get(b"k000") == b"round%04d" % rounds
    db.close()
