import bisect
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histore.skiplist import (
    PartitionedSkiplist, Skiplist, chunk_records, decode_records, encode_record, loser_tree_merge,
)


def test_basic_ops():
    sl = Skiplist(random.Random(1))
    for i in (5, 1, 9, 3):
        sl.insert(b"k%d" % i, i, 10)
    assert len(sl) == 4
    assert sl.search(b"k3")[0] == (3, 10)
    assert sl.search(b"k4")[0] is None
    sl.insert(b"k3", 33, 11)
    assert len(sl) == 4 and sl.search(b"k3")[0] == (33, 11)
    sl.delete(b"k1")
    sl.delete(b"absent")
    assert [k for k, _, _ in sl.items()] == [b"k3", b"k5", b"k9"]
    recs, visits = sl.range(b"k4", 2)
    assert [r[0] for r in recs] == [b"k5", b"k9"]
    assert visits >= 1
    sl.check()


def test_visits_grow_logarithmically():
    means = []
    for n in (1_000, 10_000, 100_000):
        sl = Skiplist(random.Random(0))
        sl.bulk_load((b"%08d" % i, i + 1, 8) for i in range(n))
        rng = random.Random(n)
        tot = sum(sl.search(b"%08d" % rng.randrange(n))[1] for _ in range(2000))
        means.append(tot / 2000)
    assert means[0] < means[1] < means[2]
    # roughly a constant number of extra visits per decade, far from linear
    assert means[2] < 3 * means[0]


def test_bulk_load_rejects_unsorted_and_nonempty():
    sl = Skiplist()
    with pytest.raises(ValueError):
        sl.bulk_load([(b"b", 1, 1), (b"a", 2, 1)])
    sl = Skiplist()
    sl.insert(b"a", 1, 1)
    with pytest.raises(ValueError):
        sl.bulk_load([(b"b", 1, 1)])


def test_loser_tree_merge_matches_sorted():
    rng = random.Random(3)
    sources = [sorted((rng.randrange(1000), s) for _ in range(rng.randrange(0, 50))) for s in range(7)]
    merged = list(loser_tree_merge(sources))
    assert [m[0] for m in merged] == sorted(x[0] for src in sources for x in src)
    assert list(loser_tree_merge([])) == []
    assert list(loser_tree_merge([[], [(1,)]])) == [(1,)]


keys = st.binary(min_size=1, max_size=6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), keys), max_size=150), keys, st.integers(1, 20))
def test_partitioned_matches_sorted_dict(script, lo, n):
    idx = PartitionedSkiplist(partitions=4, seed=2)
    ref = {}
    for i, (put, k) in enumerate(script):
        if put:
            idx.put(k, i + 1, len(k))
            ref[k] = (i + 1, len(k))
        else:
            idx.delete(k)
            ref.pop(k, None)
    idx.check()
    assert idx.to_dict() == ref
    assert len(idx) == len(ref)
    ordered = sorted(ref)
    want = ordered[bisect.bisect_left(ordered, lo):][:n]
    got, visits = idx.range(lo, n)
    assert [r[0] for r in got] == want
    assert len(visits) == 4
    for k, v in ref.items():
        assert idx.get(k)[0] == v


def test_snapshot_chunks_round_trip():
    recs = [(b"key%05d" % i, 0x1000 + i, 20) for i in range(500)]
    chunks = list(chunk_records(recs, limit=256))
    assert all(len(c) <= 256 for c in chunks)
    assert [r for c in chunks for r in decode_records(c)] == recs
    with pytest.raises(ValueError):
        decode_records(encode_record(b"abc", 1, 1)[:-1])
    with pytest.raises(ValueError):
        list(chunk_records([(b"x" * 300, 1, 1)], limit=256))
    idx = PartitionedSkiplist(partitions=3)
    idx.bulk_load(recs)
    assert list(idx.items()) == recs
