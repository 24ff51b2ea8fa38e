import csv
import io
import struct

import pytest

from histore.errors import (
    ConfigError, MemoryFault, OutOfMemory, RpcError, RpcTimeout, UnknownEndpoint, UnknownNode,
)
from histore.runtime import SimRuntime, ThreadRuntime
from histore.transport.base import US, NetConfig
from histore.transport.sim import SimTransport
from histore.transport.sockets import SocketTransport


@pytest.fixture(params=["sim", "socket"])
def backend(request):
    if request.param == "sim":
        rt = SimRuntime(0)
        net = SimTransport(rt, NetConfig())
    else:
        rt = ThreadRuntime(0)
        net = SocketTransport(rt, NetConfig(), timeout=0.5)
    for n in (1, 2, 3):
        net.add_node(n)
    yield rt, net
    if hasattr(net, "close"):
        net.close()


def _echo(payload, ctx):
    yield from ctx.compute(0)
    return payload


def test_region_zero_init_and_echo(backend):
    rt, net = backend
    region = net.register_region(1, 64)
    port = net.port(2)
    local = bytearray(64)

    def main():
        first = yield from port.read(1, region.region_id, 0, 8)
        yield from port.write(1, region.region_id, 8, b"abcdefgh")
        local[8:16] = b"abcdefgh"
        yield from port.write(1, region.region_id, 30, b"xyz")
        local[30:33] = b"xyz"
        whole = yield from port.read(1, region.region_id, 0, 64)
        return first, whole

    first, whole = rt.run(main())
    assert first == b"\0" * 8
    assert whole == bytes(local)


def test_cas_semantics(backend):
    rt, net = backend
    region = net.register_region(1, 64)
    port = net.port(2)

    def main():
        a = yield from port.cas64(1, region.region_id, 0, 0, 7)
        b = yield from port.cas64(1, region.region_id, 0, 0, 9)
        word = yield from port.read(1, region.region_id, 0, 8)
        return a, b, struct.unpack("<Q", word)[0]

    assert rt.run(main()) == (0, 7, 7)
    with pytest.raises(MemoryFault):
        rt.run(port.cas64(1, region.region_id, 4, 0, 1))


def test_bounds_and_unknowns(backend):
    rt, net = backend
    region = net.register_region(1, 16)
    port = net.port(2)
    with pytest.raises(MemoryFault):
        rt.run(port.read(1, region.region_id, 12, 8))
    with pytest.raises(MemoryFault):
        rt.run(port.read(1, 999, 0, 8))
    with pytest.raises(UnknownNode):
        net.register_region(42, 8)
    with pytest.raises(ValueError):
        net.register_region(1, 0)
    with pytest.raises(UnknownEndpoint):
        rt.run(port.call(1, "nope", b""))


def test_rpc_echo_and_errors(backend):
    rt, net = backend

    def boom(payload, ctx):
        yield from ctx.compute(0)
        raise RpcError("bad thing", detail=3)

    net.serve(1, "echo", _echo)
    net.serve(1, "boom", boom)
    port = net.port(2)
    assert rt.run(port.call(1, "echo", b"hello")) == b"hello"
    reply = rt.run(port.call_ex(1, "echo", b"x"))
    assert "queue_wait" in reply.phases and reply.elapsed > 0
    with pytest.raises(RpcError) as ei:
        rt.run(port.call(1, "boom"))
    assert ei.value.data == {"detail": 3}


def test_faults(backend):
    rt, net = backend
    region = net.register_region(1, 64)
    net.serve(1, "echo", _echo)
    port = net.port(2)
    net.inject_fault("partition", 1)
    with pytest.raises(RpcTimeout):
        rt.run(port.call(1, "echo", b"a", timeout=0.001))
    net.inject_fault("heal", 1)
    assert rt.run(port.call(1, "echo", b"b")) == b"b"
    net.inject_fault("crash", 1)
    net.inject_fault("crash", 1)  # sticky and idempotent
    assert net.is_crashed(1)
    with pytest.raises(RpcTimeout):
        rt.run(port.read(1, region.region_id, 0, 8))
    with pytest.raises(RpcTimeout):
        rt.run(port.call(1, "echo", b"c"))
    with pytest.raises(ValueError):
        net.inject_fault("meteor", 2)


def test_counters_and_csv(backend):
    rt, net = backend
    region = net.register_region(1, 64)
    net.serve(1, "echo", _echo)
    port = net.port(2)

    def main():
        for _ in range(100):
            yield from port.read(1, region.region_id, 0, 8, tag="get")
        yield from port.write(1, region.region_id, 0, b"x" * 8)
        yield from port.cas64(1, region.region_id, 0, 0, 1)
        yield from port.call(1, "echo", b"", tag="put")

    rt.run(main())
    c = net.counters
    assert c.get(node=1, op_class="one_sided_read") == 100
    assert c.get(node=1, op_class="one_sided_read", tag="get") == 100
    assert c.get(node=1, op_class="rpc", tag="get") == 0
    assert c.get(node=1, op_class="rpc") == 1
    rows = list(csv.reader(io.StringIO(c.to_csv())))
    assert rows[0] == ["node", "op_class", "count"]
    assert ["1", "one_sided_read", "100"] in rows
    assert ["1", "one_sided_write", "1"] in rows and ["1", "cas", "1"] in rows
    c.reset()
    assert c.get() == 0


# -- deterministic backend only ------------------------------------------------


def test_timing_costs(sim):
    rt, net = sim
    cfg = net.cfg
    for n in (1, 2):
        net.add_node(n)
    region = net.register_region(1, 64)
    net.serve(1, "echo", _echo)
    port = net.port(2)

    def main():
        t0 = rt.now()
        yield from port.read(1, region.region_id, 0, 8)
        t1 = rt.now()
        yield from port.call(1, "echo", b"")
        return t1 - t0, rt.now() - t1

    one, two = rt.run(main())
    assert one == pytest.approx(cfg.one_sided_rtt + cfg.issue_cost + 8 / cfg.bandwidth)
    assert two == pytest.approx(cfg.rpc_rtt + cfg.issue_cost + cfg.per_request_cpu_cost)


@pytest.mark.parametrize("k", [2, 5, 10])
def test_single_thread_queueing_oracle(k):
    rt = SimRuntime(0)
    cfg = NetConfig(rpc_threads_per_node=1)
    net = SimTransport(rt, cfg)
    net.add_node(1)
    work = 2 * US
    c = cfg.per_request_cpu_cost + work

    def slow(payload, ctx):
        yield from ctx.compute(work)
        return b""

    net.serve(1, "slow", slow)
    waits = []

    def caller(i):
        net.add_node(10 + i)
        reply = yield from net.port(10 + i).call_ex(1, "slow")
        waits.append(reply.phases["queue_wait"])

    def main():
        yield from rt.wait_all([rt.spawn(caller(i)) for i in range(k)])

    rt.run(main())
    assert max(waits) == pytest.approx((k - 1) * c, rel=1e-6)
    assert sorted(waits) == pytest.approx([i * c for i in range(k)], rel=1e-6)


def test_one_sided_bypasses_rpc_pool():
    rt = SimRuntime(0)
    net = SimTransport(rt, NetConfig(rpc_threads_per_node=1))
    for n in (1, 2, 3):
        net.add_node(n)
    region = net.register_region(1, 64)

    def hog(payload, ctx):
        yield from ctx.compute(1000 * US)
        return b""

    net.serve(1, "hog", hog)
    lat = []

    def reader():
        yield from rt.sleep(10 * US)
        t0 = rt.now()
        yield from net.port(3).read(1, region.region_id, 0, 8)
        lat.append(rt.now() - t0)

    def main():
        yield from rt.wait_all([rt.spawn(net.port(2).call(1, "hog", timeout=1)), rt.spawn(reader())])

    rt.run(main())
    assert lat[0] < 5 * US


def test_cas_exactly_one_winner(sim):
    rt, net = sim
    net.add_node(1)
    region = net.register_region(1, 8)
    wins = []

    def racer(i):
        net.add_node(10 + i)
        prior = yield from net.port(10 + i).cas64(1, region.region_id, 0, 0, i + 1)
        if prior == 0:
            wins.append(i)

    def main():
        yield from rt.wait_all([rt.spawn(racer(i)) for i in range(32)])

    rt.run(main())
    assert len(wins) == 1
    assert region.read64(0) == wins[0] + 1


def test_words_never_torn(sim):
    rt, net = sim
    net.add_node(1)
    region = net.register_region(1, 16)
    A, B = b"A" * 8, b"B" * 8
    region.write(0, A + A)
    seen = []

    def writer(node, word):
        net.add_node(node)
        port = net.port(node)
        for i in range(200):
            val = A if i % 2 else B
            yield from port.write(1, region.region_id, word * 8, val)

    def reader():
        net.add_node(20)
        port = net.port(20)
        for _ in range(300):
            seen.append((yield from port.read(1, region.region_id, 0, 16)))

    def main():
        yield from rt.wait_all([rt.spawn(writer(10, 0)), rt.spawn(writer(11, 1)), rt.spawn(reader())])

    rt.run(main())
    for buf in seen:
        assert buf[:8] in (A, B) and buf[8:] in (A, B)


def test_socket_words_never_torn():
    rt = ThreadRuntime(0)
    net = SocketTransport(rt, timeout=1.0)
    try:
        net.add_node(1)
        for n in (2, 3):
            net.add_node(n)
        region = net.register_region(1, 16)
        A, B = b"A" * 8, b"B" * 8
        region.write(0, A + A)

        def flipper():
            port = net.port(2)
            for i in range(200):
                yield from port.write(1, region.region_id, 0, (A + A) if i % 2 else (B + B))

        def reader():
            port = net.port(3)
            out = []
            for _ in range(200):
                out.append((yield from port.read(1, region.region_id, 0, 16)))
            return out

        t = rt.spawn(flipper())
        seen = rt.run(reader())
        rt.run(t.join(5))
        for buf in seen:
            assert buf[:8] in (A, B) and buf[8:] in (A, B)
    finally:
        net.close()


def test_memory_budget():
    rt = SimRuntime(0)
    net = SimTransport(rt, memory_budget=128)
    net.add_node(1)
    net.register_region(1, 100)
    with pytest.raises(OutOfMemory):
        net.register_region(1, 100)


def test_netconfig_validation():
    with pytest.raises(ConfigError):
        NetConfig(rpc_threads_per_node=0)
    with pytest.raises(ConfigError):
        NetConfig(one_sided_rtt=-1)
    cfg = NetConfig.from_section({"one_sided_rtt_us": 5, "rpc_threads_per_node": 2})
    assert cfg.one_sided_rtt == pytest.approx(5 * US) and cfg.rpc_threads_per_node == 2
    with pytest.raises(ConfigError):
        NetConfig.from_section({"bogus": 1})


def test_sim_is_deterministic():
    def once():
        rt = SimRuntime(3)
        net = SimTransport(rt)
        net.add_node(1)
        net.serve(1, "echo", _echo)
        ends = []

        def caller(i):
            net.add_node(10 + i)
            yield from rt.sleep(rt.rng.random() * 1e-6)
            yield from net.port(10 + i).call(1, "echo", b"x" * i)
            ends.append((i, rt.now()))

        def main():
            yield from rt.wait_all([rt.spawn(caller(i)) for i in range(12)])

        rt.run(main())
        return ends

    assert once() == once()
