import bisect

import pytest

from histore.cluster import make_cluster
from histore.errors import ScanUnavailable
from histore.trace import PhaseTrace


def test_put_get_update_delete(cluster, client):
    def main():
        yield from client.put(b"k1", b"v1")
        a = yield from client.get(b"k1")
        yield from client.update(b"k1", b"v2")
        b = yield from client.get(b"k1")
        yield from client.delete(b"k1")
        c = yield from client.get(b"k1")
        yield from client.delete(b"never-there")
        s = yield from client.scan(b"", 10)
        return a, b, c, s

    assert cluster.run(main()) == (b"v1", b"v2", None, [])


def test_update_makes_old_item_unreachable(cluster, client):
    cluster.run(client.put(b"k", b"old"))
    old = cluster.index_nodes[1].hash.get(b"k").value_addr
    cluster.run(client.update(b"k", b"new"))
    rep = cluster.run(cluster.quiesce_check(0, {b"k": b"new"}))
    assert rep.ok, rep.summary()
    assert all(m[b"k"][0] != old for m in rep.maps.values())


def test_healthy_get_uses_no_index_rpc(cluster, client):
    net = cluster.net

    def main():
        for i in range(20):
            yield from client.put(b"key%02d" % i, b"v")
        net.counters.reset()
        for i in range(40):
            yield from client.get(b"key%02d" % i)

    cluster.run(main())
    for n in (1, 2, 3):
        assert net.counters.get(node=n, op_class="rpc") == 0
    # 20 hits and 20 misses, each at least one bucket read
    assert net.counters.get(node=1, op_class="one_sided_read", tag="get") >= 40
    assert net.counters.get(op_class="one_sided_write") == 0


def test_get_trace_is_index_plus_data(cluster, client):
    cluster.run(client.put(b"traced", b"x" * 20))
    tr = PhaseTrace()
    assert cluster.run(client.get(b"traced", tr)) == b"x" * 20
    assert tr.queue_wait == 0
    assert tr.index_access + tr.data_access == pytest.approx(tr.total)
    assert tr.extra["path"] == "one_sided"


def test_scan_bounds(cluster, client):
    def main():
        for i in range(30):
            yield from client.put(b"s%02d" % i, b"%d" % i)
        a = yield from client.scan(b"s10", 5)
        b = yield from client.scan(b"\xff", 5)
        c = yield from client.scan(b"s28", 100)
        return a, b, c

    a, b, c = cluster.run(main())
    assert [k for k, _ in a] == [b"s%02d" % i for i in range(10, 15)]
    assert b == []
    assert c == [(b"s28", b"28"), (b"s29", b"29")]
    with pytest.raises(ValueError):
        cluster.run(client.scan(b"", 0))


def test_scan_across_groups_matches_sorted_oracle():
    cluster = make_cluster("hybrid", seed=2, groups=3, capacity=4096)
    c = cluster.client()
    keys = sorted(b"g%04d" % (i * 7 % 1000) for i in range(300))

    def main():
        for k in keys:
            yield from c.put(k, k[::-1])
        out = []
        for lo, n in ((b"", 50), (b"g0500", 100), (b"g0990", 20), (b"g09", 7)):
            out.append((lo, n, (yield from c.scan(lo, n))))
        return out

    owners = {cluster.group_of(k) for k in keys}
    assert owners == {0, 1, 2}
    for lo, n, got in cluster.run(main()):
        i = bisect.bisect_left(keys, lo)
        assert got == [(k, k[::-1]) for k in keys[i:i + n]]
    assert not cluster.rt.task_failures


def test_all_hash_mode_has_no_scans():
    cluster = make_cluster("all-hash", seed=0, capacity=1024)
    c = cluster.client()
    cluster.run(c.put(b"a", b"1"))
    assert cluster.run(c.get(b"a")) == b"1"
    with pytest.raises(ScanUnavailable):
        cluster.run(c.scan(b"", 5))


def test_all_skiplist_mode_gets_by_rpc():
    cluster = make_cluster("all-skiplist", seed=0, capacity=1024)
    c = cluster.client()

    def main():
        yield from c.put(b"a", b"1")
        tr = PhaseTrace()
        v = yield from c.get(b"a", tr)
        miss = yield from c.get(b"b")
        return v, miss, tr

    v, miss, tr = cluster.run(main())
    assert (v, miss) == (b"1", None)
    assert tr.extra["path"] == "rpc"
    assert sum(cluster.net.counters.get(node=n, op_class="rpc", tag="get") for n in (1, 2, 3)) == 2


def test_scan_round_robins_backups(cluster, client):
    cluster.run(client.put(b"a", b"1"))
    cluster.net.counters.reset()
    for _ in range(6):
        cluster.run(client.scan(b"", 1))
    assert cluster.net.counters.get(node=2, op_class="rpc", tag="scan") == 3
    assert cluster.net.counters.get(node=3, op_class="rpc", tag="scan") == 3
    assert cluster.net.counters.get(node=1, op_class="rpc", tag="scan") == 0
