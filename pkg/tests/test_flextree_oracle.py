"""Property tests: the extent index against the flat byte-map oracle."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexstore.flextree import UNMAPPED, FlexTree
from oracles import ByteMapOracle, expand_runs


def apply_op(tree, oracle, op):
    kind, offset, length, phys = op
    if kind == "insert":
        tree.insert_range(offset, length, phys)
        oracle.insert(offset, length, phys)
    elif kind == "collapse":
        freed = tree.collapse_range(offset, length)
        removed = oracle.collapse(offset, length)
        assert expand_runs(freed) == removed
    elif kind == "write":
        tree.write_range(offset, length, phys)
        oracle.write(offset, length, phys)


def random_op(rng, size, max_len=4096):
    kind = rng.choice(("insert", "insert", "write", "collapse"))
    length = rng.randint(1, max_len)
    if kind == "collapse":
        if size == 0:
            return None
        length = min(length, size)
        offset = rng.randint(0, size - length)
        return ("collapse", offset, length, 0)
    if kind == "write":
        offset = rng.randint(0, size + max_len)
    else:
        offset = rng.randint(0, size)
    phys = rng.randint(0, 1 << 40)
    return (kind, offset, length, phys)


def run_against_oracle(seed, ops, capacity, space_cap=1 << 20, check_every=0):
    rng = random.Random(seed)
    tree = FlexTree(capacity=capacity)
    oracle = ByteMapOracle()
    for i in range(ops):
        op = random_op(rng, oracle.size)
        if op is None:
            continue
        if op[0] != "collapse" and oracle.size + op[2] > space_cap:
            op = ("collapse", rng.randint(0, oracle.size // 2),
                  max(1, oracle.size // 4), 0)
        apply_op(tree, oracle, op)
        if check_every and i % check_every == 0:
            tree.check()
    assert tree.total_size() == oracle.size
    if oracle.size:
        assert expand_runs(tree.query_range(0, oracle.size)) == oracle.slice(0, oracle.size)
    tree.check()
    return tree, oracle


@pytest.mark.parametrize("seed,capacity", [(1, 6), (2, 8), (3, 64), (4, 13)])
def test_mixed_ops_match_oracle(seed, capacity):
    run_against_oracle(seed, 1500, capacity, check_every=97)


def test_random_inserts_match_oracle():
    rng = random.Random(7)
    tree = FlexTree()
    oracle = ByteMapOracle()
    for _ in range(10_000):
        offset = rng.randint(0, oracle.size)
        length = rng.randint(1, 64)
        phys = rng.randint(0, 1 << 40)
        tree.insert_range(offset, length, phys)
        oracle.insert(offset, length, phys)
    assert expand_runs(tree.query_range(0, oracle.size)) == oracle.slice(0, oracle.size)
    tree.check()


def test_subrange_queries_match_oracle_slices():
    rng = random.Random(11)
    tree, oracle = run_against_oracle(11, 800, 8)
    for _ in range(300):
        if oracle.size == 0:
            break
        length = rng.randint(1, min(2048, oracle.size))
        offset = rng.randint(0, oracle.size - length)
        assert expand_runs(tree.query_range(offset, length)) == oracle.slice(offset, length)


def test_write_heavy_4k_blocks_match_oracle():
    rng = random.Random(13)
    tree = FlexTree()
    oracle = ByteMapOracle()
    blocks = list(range(256))
    rng.shuffle(blocks)
    for i, b in enumerate(blocks):
        tree.write_range(b * 4096, 4096, (i + 1) << 20)
        oracle.write(b * 4096, 4096, (i + 1) << 20)
    assert oracle.size == 1 << 20
    assert expand_runs(tree.query_range(0, oracle.size)) == oracle.slice(0, oracle.size)
    tree.check()


def test_find_extent_exhaustive_over_random_space():
    tree, oracle = run_against_oracle(17, 400, 8, space_cap=1 << 16)
    size = tree.total_size()
    pos = 0
    while pos < size:
        start, phys, length = tree.find_extent(pos)
        assert start <= pos < start + length
        src = oracle.source_at(pos)
        if phys == UNMAPPED:
            assert src == (1 << 64) - 1
        else:
            assert src == phys + (pos - start)
        # Jump by whole extents so the scan is exhaustive but fast.
        pos = start + length
    assert pos == size


def test_remap_batches_match_oracle():
    rng = random.Random(19)
    tree, oracle = run_against_oracle(19, 300, 8, space_cap=1 << 16)
    fresh = 1 << 45
    for _ in range(200):
        if tree.total_size() == 0:
            break
        pos = rng.randint(0, tree.total_size() - 1)
        start, phys, length = tree.find_extent(pos)
        if phys == UNMAPPED:
            continue
        sub_off = rng.randint(0, length - 1)
        sub_len = rng.randint(1, length - sub_off)
        tree.remap(start + sub_off, sub_len, fresh)
        oracle.write(start + sub_off, sub_len, fresh)
        fresh += sub_len
    assert expand_runs(tree.query_range(0, tree.total_size())) == oracle.slice(0, oracle.size)
    tree.check()


def test_maintenance_preserves_queries_under_churn():
    # Force splits and merges by growing and shrinking; every
    # intermediate tree must keep the tiling and pivot invariants.
    rng = random.Random(23)
    tree = FlexTree(capacity=6)
    oracle = ByteMapOracle()
    for i in range(3000):
        if oracle.size < 2000 or rng.random() < 0.55:
            offset = rng.randint(0, oracle.size)
            length = rng.randint(1, 50)
            phys = rng.randint(0, 1 << 30)
            tree.insert_range(offset, length, phys)
            oracle.insert(offset, length, phys)
        else:
            length = rng.randint(1, min(200, oracle.size))
            offset = rng.randint(0, oracle.size - length)
            apply_op(tree, oracle, ("collapse", offset, length, 0))
        if i % 61 == 0:
            tree.check()
    tree.check()
    assert expand_runs(tree.query_range(0, oracle.size)) == oracle.slice(0, oracle.size)


op_strategy = st.tuples(
    st.sampled_from(["insert", "write", "collapse"]),
    st.integers(min_value=0, max_value=300),
    st.integers(min_value=1, max_value=40),
    st.integers(min_value=0, max_value=1 << 20),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(op_strategy, max_size=60), st.integers(min_value=6, max_value=10))
def test_hypothesis_op_sequences(ops, capacity):
    tree = FlexTree(capacity=capacity)
    oracle = ByteMapOracle()
    for kind, offset, length, phys in ops:
        if kind == "collapse":
            if oracle.size == 0:
                continue
            offset %= oracle.size
            length = min(length, oracle.size - offset)
            if length == 0:
                continue
            apply_op(tree, oracle, (kind, offset, length, phys))
        elif kind == "insert":
            offset = min(offset, oracle.size)
            apply_op(tree, oracle, (kind, offset, length, phys))
        else:
            apply_op(tree, oracle, (kind, offset, length, phys))
    tree.check()
    if oracle.size:
        assert expand_runs(tree.query_range(0, oracle.size)) == oracle.slice(0, oracle.size)
