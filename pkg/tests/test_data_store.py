import random

import pytest

from histore.data_store import (
    DataServer, RegionFull, item_len, read_item, read_items, store_item, unpack_addr,
)
from histore.errors import CorruptItem


@pytest.fixture
def store(sim):
    rt, net = sim
    net.add_node(5)
    net.add_node(9)
    ds = DataServer(net, 5, 1, 1 << 20)
    return rt, net, ds, net.port(9), {1: ds.info}


def test_sixteen_byte_key_thirty_two_byte_value(store):
    rt, net, ds, port, servers = store
    key, value = b"k" * 16, b"v" * 32
    addr, n, _ = rt.run(store_item(port, ds.info, key, value))
    assert n == item_len(key, value) == 52
    assert rt.run(read_item(port, servers, addr, n)) == (key, value)


def test_addresses_are_fresh_and_aligned(store):
    rt, net, ds, port, servers = store

    def main():
        out = []
        for i in range(20):
            addr, n, _ = yield from store_item(port, ds.info, b"k%d" % i, b"x" * i)
            out.append((addr, n))
        return out

    refs = rt.run(main())
    spans = sorted((unpack_addr(a)[1], unpack_addr(a)[1] + n) for a, n in refs)
    assert all(a != 0 for a, _ in refs)
    assert all(lo % 8 == 0 for lo, _ in spans)
    assert all(spans[i][1] <= spans[i + 1][0] for i in range(len(spans) - 1))
    items = rt.run(read_items(port, servers, refs))
    assert items == [(b"k%d" % i, b"x" * i) for i in range(20)]


def test_oversize_and_wrong_length(store):
    rt, net, ds, port, servers = store
    with pytest.raises(ValueError):
        rt.run(store_item(port, ds.info, b"k", b"v" * 300))
    addr, n, _ = rt.run(store_item(port, ds.info, b"key", b"value"))
    with pytest.raises(CorruptItem):
        rt.run(read_item(port, servers, addr, n + 3))
    with pytest.raises(CorruptItem):
        ds.local_read(addr | (7 << 40), n)


def test_region_full(sim):
    rt, net = sim
    net.add_node(5)
    net.add_node(9)
    ds = DataServer(net, 5, 1, 64)
    port = net.port(9)
    rt.run(store_item(port, ds.info, b"a", b"b" * 40))
    with pytest.raises(RegionFull):
        rt.run(store_item(port, ds.info, b"a", b"b" * 40))


def test_random_items_round_trip(store):
    rt, net, ds, port, servers = store
    rng = random.Random(11)
    oracle = {}

    def main():
        for i in range(10_000):
            key = b"key%d" % rng.randrange(1 << 30)
            value = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 40)))
            addr, n, _ = yield from store_item(port, ds.info, key, value)
            oracle[(addr, n)] = (key, value)

    rt.run(main())
    assert len(oracle) == 10_000
    for (addr, n), kv in oracle.items():
        assert ds.local_read(addr, n) == kv
    sample = list(oracle)[:500]
    assert rt.run(read_items(port, servers, sample)) == [oracle[r] for r in sample]
