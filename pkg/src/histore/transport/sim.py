"""Deterministic in-process transport on a virtual clock.

One-sided operations never touch the target's RPC thread pool: they cost
network time only.  RPCs wait for one of ``rpc_threads_per_node`` pool slots
on the target, pay ``per_request_cpu_cost`` and then run the handler.
"""

from __future__ import annotations

import logging

from histore.errors import (
    MemoryFault,
    NodeDown,
    OutOfMemory,
    RpcError,
    RpcTimeout,
    UnknownEndpoint,
    UnknownNode,
)
from histore.runtime import SimRuntime, WaitTimeout
from histore.transport.base import MemRegion, NetConfig, Reply, TransportCounters

log = logging.getLogger(__name__)

DEFAULT_MEMORY_BUDGET = 8 << 30


class RpcContext:
    """Handed to every RPC handler."""

    __slots__ = ("net", "node", "src", "arrival", "phases", "_token", "_pool")

    def __init__(self, net, node, src, arrival, token, pool):
        self.net = net
        self.node = node
        self.src = src
        self.arrival = arrival
        self.phases: dict[str, float] = {}
        self._token = token
        self._pool = pool

    @property
    def detached(self) -> bool:
        return self._token is None

    def compute(self, dt: float):
        yield from self.net.rt.compute(dt)

    def detach(self) -> None:
        """Give the RPC thread back while the request waits on other work."""
        if self._token is not None:
            self._pool.release(self._token)
            self._token = None


class _Node:
    __slots__ = ("node_id", "regions", "endpoints", "pool", "crashed", "incarnation", "mem_used")

    def __init__(self, node_id: int, rt, threads: int):
        self.node_id = node_id
        self.regions: dict[int, MemRegion] = {}
        self.endpoints: dict[str, object] = {}
        self.pool = rt.pool(threads)
        self.crashed = False
        self.incarnation = 0
        self.mem_used = 0


class Port:
    """An actor's queue pair: the handle used to issue remote operations."""

    __slots__ = ("net", "node", "free_at")

    def __init__(self, net: "SimTransport", node: int):
        self.net = net
        self.node = node
        self.free_at = 0.0

    # -- one-sided ---------------------------------------------------------

    def _issue(self, n: int) -> float:
        net = self.net
        now = net.rt.now()
        start = max(now, self.free_at)
        self.free_at = start + n * net.cfg.issue_cost
        return self.free_at - now

    def _one_sided(self, targets, op_class: str, tag, fn, nbytes: int):
        net = self.net
        rt = net.rt
        net.check_alive(self.node)
        for t in targets:
            net.node(t)
            net.counters.inc(t, op_class, tag)
        half = net.cfg.one_sided_rtt / 2
        t0 = rt.now()
        yield from rt.sleep(self._issue(len(targets)) + half + nbytes / net.cfg.bandwidth)
        if not all(net.reachable(self.node, t) for t in targets):
            yield from rt.sleep(max(0.0, net.cfg.timeout - (rt.now() - t0)))
            raise RpcTimeout(f"one-sided {op_class} to {targets}")
        result = fn()
        yield from rt.sleep(half)
        net.check_alive(self.node)
        return result

    def read(self, target: int, region_id: int, offset: int, length: int, tag: str | None = None):
        region = self.net.region(target, region_id)
        region.check(offset, length)
        return (yield from self._one_sided(
            (target,), "one_sided_read", tag, lambda: region.read(offset, length), length))

    def read_many(self, reads, tag: str | None = None):
        """Pipelined reads posted together: ``reads`` = [(target, region, off, len)]."""
        if not reads:
            return []
        regions = []
        for target, region_id, off, length in reads:
            region = self.net.region(target, region_id)
            region.check(off, length)
            regions.append((region, off, length))
        nbytes = sum(r[3] for r in reads)
        return (yield from self._one_sided(
            [r[0] for r in reads], "one_sided_read", tag,
            lambda: [rg.read(off, ln) for rg, off, ln in regions], nbytes))

    def write(self, target: int, region_id: int, offset: int, data: bytes, tag: str | None = None):
        region = self.net.region(target, region_id)
        region.check(offset, len(data))
        data = bytes(data)
        yield from self._one_sided(
            (target,), "one_sided_write", tag, lambda: region.write(offset, data), len(data))

    def cas64(self, target: int, region_id: int, offset: int, expected: int, new: int,
              tag: str | None = None):
        if offset % 8:
            raise MemoryFault(f"cas at unaligned offset {offset}")
        region = self.net.region(target, region_id)
        region.check(offset, 8)
        return (yield from self._one_sided(
            (target,), "cas", tag, lambda: region.cas64(offset, expected, new), 8))

    # -- two-sided ---------------------------------------------------------

    def call_ex(self, target: int, endpoint: str, payload: bytes = b"",
                timeout: float | None = None, tag: str | None = None):
        net = self.net
        rt = net.rt
        cfg = net.cfg
        net.check_alive(self.node)
        node = net.node(target)
        timeout = cfg.timeout if timeout is None else timeout
        net.counters.inc(target, "rpc", tag)
        t0 = rt.now()
        yield from rt.sleep(self._issue(1) + cfg.rpc_rtt / 2 + len(payload) / cfg.bandwidth)
        if not net.reachable(self.node, target):
            yield from rt.sleep(max(0.0, timeout - (rt.now() - t0)))
            raise RpcTimeout(f"rpc {endpoint} to node {target}")
        done = rt.signal()
        rt.spawn(net._serve(node, self.node, endpoint, payload, done), name=f"rpc:{endpoint}@{target}")
        try:
            reply = yield from done.wait(max(0.0, timeout - (rt.now() - t0)))
        except WaitTimeout:
            raise RpcTimeout(f"rpc {endpoint} to node {target}") from None
        if reply is None or not net.reachable(self.node, target):
            yield from rt.sleep(max(0.0, timeout - (rt.now() - t0)))
            raise RpcTimeout(f"rpc {endpoint} to node {target}")
        body_len = 0 if isinstance(reply, tuple) else len(reply.body)
        yield from rt.sleep(cfg.rpc_rtt / 2 + body_len / cfg.bandwidth)
        net.check_alive(self.node)
        if isinstance(reply, tuple):
            raise RpcError.rebuild(*reply)
        reply.elapsed = rt.now() - t0
        return reply

    def call(self, target: int, endpoint: str, payload: bytes = b"",
             timeout: float | None = None, tag: str | None = None):
        reply = yield from self.call_ex(target, endpoint, payload, timeout, tag)
        return reply.body


class SimTransport:
    kind = "sim"

    def __init__(self, rt: SimRuntime, cfg: NetConfig | None = None,
                 memory_budget: int = DEFAULT_MEMORY_BUDGET):
        self.rt = rt
        self.cfg = cfg or NetConfig()
        self.memory_budget = memory_budget
        self.counters = TransportCounters()
        self._nodes: dict[int, _Node] = {}
        self._partitioned: set[int] = set()
        self._next_region = 1

    # -- membership --------------------------------------------------------

    def add_node(self, node_id: int) -> None:
        if node_id in self._nodes:
            raise ValueError(f"node {node_id} already exists")
        self._nodes[node_id] = _Node(node_id, self.rt, self.cfg.rpc_threads_per_node)

    def has_node(self, node_id: int) -> bool:
        return node_id in self._nodes

    def node(self, node_id: int) -> _Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(f"node {node_id}") from None

    def nodes(self) -> list[int]:
        return sorted(self._nodes)

    def port(self, node_id: int) -> Port:
        self.node(node_id)
        return Port(self, node_id)

    def is_crashed(self, node_id: int) -> bool:
        return self.node(node_id).crashed

    def check_alive(self, node_id: int) -> None:
        if self._nodes[node_id].crashed:
            raise NodeDown(f"node {node_id} is down")

    def reachable(self, src: int, dst: int) -> bool:
        node = self._nodes.get(dst)
        if node is None or node.crashed:
            return False
        if src == dst:
            return True
        return src not in self._partitioned and dst not in self._partitioned

    # -- memory ------------------------------------------------------------

    def register_region(self, node_id: int, size: int) -> MemRegion:
        if size <= 0:
            raise ValueError("region size must be > 0")
        node = self.node(node_id)
        if node.mem_used + size > self.memory_budget:
            raise OutOfMemory(f"node {node_id}: {size} bytes exceeds budget")
        region = MemRegion(self._next_region, node_id, size)
        self._next_region += 1
        node.regions[region.region_id] = region
        node.mem_used += size
        return region

    def region(self, node_id: int, region_id: int) -> MemRegion:
        try:
            return self.node(node_id).regions[region_id]
        except KeyError:
            raise MemoryFault(f"region {region_id} not registered on node {node_id}") from None

    # -- rpc ---------------------------------------------------------------

    def serve(self, node_id: int, endpoint: str, handler) -> None:
        """Register ``handler(payload, ctx)`` (a generator function)."""
        self.node(node_id).endpoints[endpoint] = handler

    def _serve(self, node: _Node, src: int, endpoint: str, payload: bytes, done):
        rt = self.rt
        incarnation = node.incarnation
        arrival = rt.now()
        token = yield from node.pool.acquire()
        ctx = RpcContext(self, node.node_id, src, arrival, token, node.pool)
        ctx.phases["queue_wait"] = rt.now() - arrival
        reply = None
        try:
            yield from rt.compute(self.cfg.per_request_cpu_cost)
            handler = node.endpoints.get(endpoint)
            if handler is None:
                raise UnknownEndpoint(f"node {node.node_id} has no endpoint {endpoint!r}")
            body = yield from handler(payload, ctx)
            reply = Reply(body if body is not None else b"", ctx.phases)
        except RpcError as exc:
            reply = (exc.code, exc.message, exc.data)
        except NodeDown:
            reply = None
        except Exception as exc:
            rt.task_failures.append((f"handler {endpoint}@{node.node_id}", exc))
            log.exception("handler %s on node %d failed", endpoint, node.node_id)
            reply = ("error", f"internal: {exc!r}", {})
        finally:
            ctx.detach()
        if node.crashed or node.incarnation != incarnation:
            reply = None
        done.set(reply)

    # -- faults ------------------------------------------------------------

    def inject_fault(self, kind: str, node_id: int) -> None:
        node = self.node(node_id)
        if kind == "crash":
            node.crashed = True
        elif kind == "partition":
            self._partitioned.add(node_id)
        elif kind == "heal":
            self._partitioned.discard(node_id)
        else:
            raise ValueError(f"unknown fault kind {kind!r}")
