import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histore.checker import DELETE, GET, INF, PUT, SCAN, History, Op, brute_force, check_history

KEYS = [b"a", b"b", b"c"]


def _op(i, kind, key, value=None, call=0, ret=1, result=None, ok=True):
    return Op(i, 0, kind, key, value, call, ret if ok else INF, result, ok)


def test_sequential_history():
    ops = [
        _op(0, PUT, b"a", b"1", 0, 1),
        _op(1, GET, b"a", None, 2, 3, b"1"),
        _op(2, DELETE, b"a", None, 4, 5),
        _op(3, GET, b"a", None, 6, 7, None),
    ]
    assert check_history(ops).ok and brute_force(ops)


def test_stale_read_is_rejected():
    ops = [
        _op(0, PUT, b"a", b"1", 0, 1),
        _op(1, PUT, b"a", b"2", 2, 3),
        _op(2, GET, b"a", None, 4, 5, b"1"),
    ]
    res = check_history(ops)
    assert not res.ok and res.key == b"a"
    assert not brute_force(ops)


def test_concurrent_reads_may_see_either_value():
    base = [_op(0, PUT, b"a", b"1", 0, 1), _op(1, PUT, b"a", b"2", 2, 10)]
    for seen in (b"1", b"2"):
        ops = base + [_op(2, GET, b"a", None, 3, 4, seen)]
        assert check_history(ops).ok and brute_force(ops)


def test_touching_intervals_are_concurrent():
    # ret == call does not order two operations
    ops = [_op(0, GET, b"a", None, 0, 5, b"1"), _op(1, PUT, b"a", b"1", 5, 9)]
    assert check_history(ops).ok and brute_force(ops)


def test_pending_write_may_or_may_not_apply():
    base = [_op(0, PUT, b"a", b"1", 0, 1), _op(1, PUT, b"a", b"2", 2, ok=False)]
    for seen in (b"1", b"2"):
        ops = base + [_op(2, GET, b"a", None, 5, 6, seen)]
        assert check_history(ops).ok
    # but once observed, the pending write cannot be un-applied
    ops = base + [_op(2, GET, b"a", None, 5, 6, b"2"), _op(3, GET, b"a", None, 7, 8, b"1")]
    assert not check_history(ops).ok and not brute_force(ops)


def test_scan_reads_cover_range():
    ops = [
        _op(0, PUT, b"a", b"1", 0, 1),
        _op(1, PUT, b"c", b"3", 0, 1),
        _op(2, SCAN, b"a", 5, 2, 3, [(b"a", b"1")]),  # misses c
    ]
    assert not check_history(ops).ok
    assert not brute_force(ops)
    ops[2].result = [(b"a", b"1"), (b"c", b"3")]
    assert check_history(ops).ok and brute_force(ops)
    # a truncated scan says nothing about keys past its last entry
    ops[2].value, ops[2].result = 1, [(b"a", b"1")]
    assert check_history(ops).ok and brute_force(ops)


def test_history_recorder_stamps():
    counter = itertools.count(1)
    h = History(lambda: next(counter))
    a = h.begin(0, PUT, b"k", b"v")
    b = h.begin(1, GET, b"k")
    h.end(a)
    h.end(b, b"v")
    c = h.begin(0, DELETE, b"k")
    h.fail(c)
    assert (a.call, b.call, a.ret, b.ret) == (1, 2, 3, 4)
    assert c.pending and c.ret == INF
    assert check_history(h).ok


def test_brute_force_limit():
    ops = [_op(i, PUT, b"a", b"%d" % i, i, i + 1) for i in range(12)]
    with pytest.raises(ValueError):
        brute_force(ops)


@st.composite
def histories(draw, with_scans):
    """Generate from a sequential run with random intervals, then maybe corrupt a read."""
    n = draw(st.integers(1, 7))
    kinds = [PUT, DELETE, GET] + ([SCAN] if with_scans else [])
    ops = []
    for i in range(n):
        kind = draw(st.sampled_from(kinds))
        key = draw(st.sampled_from(KEYS))
        point = draw(st.integers(0, 40)) * 2 + 1  # odd: linearization instants
        call = point - draw(st.integers(0, 20)) * 2 - 1
        ret = point + draw(st.integers(0, 20)) * 2 + 1
        pending = kind in (PUT, DELETE) and draw(st.booleans()) and draw(st.booleans())
        applies = draw(st.booleans()) if pending else True
        value = b"v%d" % i if kind == PUT else (draw(st.integers(1, 3)) if kind == SCAN else None)
        ops.append((point, i, Op(i, i, kind, key, value, call, INF if pending else ret, None, not pending),
                    applies))
    state = {}
    for point, i, op, applies in sorted(ops, key=lambda t: (t[0], t[1])):
        if op.kind == PUT and applies:
            state[op.key] = op.value
        elif op.kind == DELETE and applies:
            state.pop(op.key, None)
        elif op.kind == GET:
            op.result = state.get(op.key)
        elif op.kind == SCAN:
            op.result = [(k, state[k]) for k in sorted(state) if k >= op.key][:op.value]
    out = [t[2] for t in sorted(ops, key=lambda t: t[1])]
    reads = [o for o in out if o.kind == GET]
    if reads and draw(st.booleans()):
        victim = draw(st.sampled_from(reads))
        victim.result = draw(st.sampled_from([None, b"v0", b"v1", b"v2", b"v5"]))
    return out


@settings(max_examples=300, deadline=None)
@given(histories(with_scans=False))
def test_checker_agrees_with_brute_force_without_scans(ops):
    assert check_history(ops).ok == brute_force(ops)


@settings(max_examples=300, deadline=None)
@given(histories(with_scans=True))
def test_checker_never_rejects_a_linearizable_history(ops):
    # scans are checked per key, so the fast checker is at most as strict as brute force
    if brute_force(ops):
        assert check_history(ops).ok
