"""Loopback TCP backend for demo runs on real threads.

Every node listens on two ports.  The memory agent answers one-sided reads,
writes and CAS from a dedicated thread and never touches the RPC queue, so
the GET path still costs the index server no RPC threads.  RPC requests are
queued and served by ``rpc_threads_per_node`` worker threads.

All nodes live in one process here, but the wire protocol does not depend
on that: nothing except the port table is shared.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
import time

from histore.errors import (
    MemoryFault,
    NodeDown,
    OutOfMemory,
    RpcError,
    RpcTimeout,
    UnknownEndpoint,
    UnknownNode,
)
from histore.runtime import ThreadRuntime, drive
from histore.transport.base import MemRegion, NetConfig, Reply, TransportCounters

log = logging.getLogger(__name__)

_HDR = struct.Struct("<BII")  # op, src, payload length
_LEN = struct.Struct("<I")
_MEM = struct.Struct("<IQI")  # region, offset, length
_CAS = struct.Struct("<IQQQ")  # region, offset, expected, new

OP_READ, OP_WRITE, OP_CAS, OP_RPC = 1, 2, 3, 4
OK, FAULT, ERROR = 0, 1, 2


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


def _send_frame(sock, op: int, src: int, payload: bytes) -> None:
    sock.sendall(_HDR.pack(op, src, len(payload)) + payload)


def _recv_frame(sock) -> tuple[int, int, bytes]:
    op, src, n = _HDR.unpack(_recv_exact(sock, _HDR.size))
    return op, src, _recv_exact(sock, n)


class RpcContext:
    __slots__ = ("net", "node", "src", "arrival", "phases", "_held", "_pool")

    def __init__(self, net, node, src, arrival, pool):
        self.net = net
        self.node = node
        self.src = src
        self.arrival = arrival
        self.phases: dict[str, float] = {}
        self._pool = pool
        self._held = True

    @property
    def detached(self) -> bool:
        return not self._held

    def compute(self, dt: float):
        return
        yield  # pragma: no cover

    def detach(self) -> None:
        if self._held:
            self._held = False
            self._pool.release(None)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        node: _Node = self.server.node
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                op, src, payload = _recv_frame(sock)
            except (ConnectionError, OSError):
                return
            if not node.net.reachable(src, node.node_id):
                return  # drop: the caller times out
            reply = node.dispatch(op, src, payload)
            if reply is None or node.crashed:
                return
            try:
                sock.sendall(_LEN.pack(len(reply)) + reply)
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, node):
        self.node = node
        super().__init__(("127.0.0.1", 0), _Handler)


class _Node:
    def __init__(self, net: "SocketTransport", node_id: int):
        self.net = net
        self.node_id = node_id
        self.regions: dict[int, MemRegion] = {}
        self.endpoints: dict[str, object] = {}
        self.crashed = False
        self.mem_used = 0
        self.pool = net.rt.pool(net.cfg.rpc_threads_per_node)
        self.mem = _Server(self)
        self.rpc = _Server(self)
        for srv, name in ((self.mem, "mem"), (self.rpc, "rpc")):
            threading.Thread(target=srv.serve_forever, args=(0.02,), name=f"{name}{node_id}",
                             daemon=True).start()

    @property
    def addrs(self) -> tuple:
        return self.mem.server_address, self.rpc.server_address

    def close(self) -> None:
        for srv in (self.mem, self.rpc):
            srv.shutdown()
            srv.server_close()

    def dispatch(self, op: int, src: int, payload: bytes) -> bytes | None:
        if op == OP_RPC:
            return self._rpc(src, payload)
        try:
            if op == OP_READ:
                rid, off, n = _MEM.unpack(payload)
                return bytes([OK]) + self._region(rid).read(off, n)
            if op == OP_WRITE:
                rid, off, n = _MEM.unpack_from(payload)
                self._region(rid).write(off, payload[_MEM.size:_MEM.size + n])
                return bytes([OK])
            if op == OP_CAS:
                rid, off, exp, new = _CAS.unpack(payload)
                return bytes([OK]) + struct.pack("<Q", self._region(rid).cas64(off, exp, new))
        except MemoryFault as exc:
            return bytes([FAULT]) + str(exc).encode()
        return bytes([FAULT]) + b"bad op"

    def _region(self, rid: int) -> MemRegion:
        try:
            return self.regions[rid]
        except KeyError:
            raise MemoryFault(f"region {rid} not registered on node {self.node_id}") from None

    def _rpc(self, src: int, payload: bytes) -> bytes | None:
        (elen,) = struct.unpack_from("<H", payload)
        endpoint = payload[2:2 + elen].decode()
        body = payload[2 + elen:]
        arrival = time.monotonic()
        drive(self.pool.acquire())
        ctx = RpcContext(self.net, self.node_id, src, arrival, self.pool)
        ctx.phases["queue_wait"] = time.monotonic() - arrival
        try:
            handler = self.endpoints.get(endpoint)
            if handler is None:
                raise UnknownEndpoint(f"node {self.node_id} has no endpoint {endpoint!r}")
            out = drive(handler(body, ctx))
            head = json.dumps(ctx.phases).encode()
            return bytes([OK]) + _LEN.pack(len(head)) + head + (out or b"")
        except RpcError as exc:
            err = json.dumps([exc.code, exc.message, exc.data]).encode()
            return bytes([ERROR]) + err
        except NodeDown:
            return None
        except Exception as exc:
            log.exception("handler %s on node %d failed", endpoint, self.node_id)
            self.net.rt.task_failures.append((f"handler {endpoint}@{self.node_id}", exc))
            return bytes([ERROR]) + json.dumps(["error", f"internal: {exc!r}", {}]).encode()
        finally:
            ctx.detach()


class Port:
    """Per-actor handle; connections are pooled per (target, plane)."""

    def __init__(self, net: "SocketTransport", node: int):
        self.net = net
        self.node = node
        self._free: dict[tuple, list] = {}
        self._lock = threading.Lock()

    def _exchange(self, target: int, plane: int, op: int, payload: bytes,
                  timeout: float | None) -> bytes:
        net = self.net
        net.check_alive(self.node)
        tnode = net.node(target)
        key = (target, plane)
        with self._lock:
            free = self._free.setdefault(key, [])
            sock = free.pop() if free else None
        timeout = net.timeout if timeout is None else max(timeout, net.timeout)
        try:
            if sock is None:
                if tnode.crashed:
                    raise ConnectionError("target down")
                sock = socket.create_connection(tnode.addrs[plane], timeout=timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(timeout)
            _send_frame(sock, op, self.node, payload)
            (n,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
            reply = _recv_exact(sock, n)
        except (OSError, ConnectionError) as exc:
            if sock is not None:
                sock.close()
            raise RpcTimeout(f"node {target}: {exc}") from None
        with self._lock:
            self._free[key].append(sock)
        net.check_alive(self.node)
        return reply

    def _mem(self, target, op, payload, tag, op_class):
        self.net.counters.inc(target, op_class, tag)
        reply = self._exchange(target, 0, op, payload, None)
        if reply[0] == FAULT:
            raise MemoryFault(reply[1:].decode())
        return reply[1:]

    def read(self, target, region_id, offset, length, tag=None):
        return self._mem(target, OP_READ, _MEM.pack(region_id, offset, length), tag, "one_sided_read")
        yield  # pragma: no cover

    def read_many(self, reads, tag=None):
        out = []
        for target, region_id, off, length in reads:
            out.append(drive(self.read(target, region_id, off, length, tag)))
        return out
        yield  # pragma: no cover

    def write(self, target, region_id, offset, data, tag=None):
        data = bytes(data)
        self._mem(target, OP_WRITE, _MEM.pack(region_id, offset, len(data)) + data, tag,
                  "one_sided_write")
        return None
        yield  # pragma: no cover

    def cas64(self, target, region_id, offset, expected, new, tag=None):
        if offset % 8:
            raise MemoryFault(f"cas at unaligned offset {offset}")
        body = self._mem(target, OP_CAS, _CAS.pack(region_id, offset, expected, new), tag, "cas")
        return struct.unpack("<Q", body)[0]
        yield  # pragma: no cover

    def call_ex(self, target, endpoint, payload=b"", timeout=None, tag=None):
        self.net.counters.inc(target, "rpc", tag)
        name = endpoint.encode()
        t0 = time.monotonic()
        reply = self._exchange(target, 1, OP_RPC, struct.pack("<H", len(name)) + name + bytes(payload),
                               timeout)
        if reply[0] == ERROR:
            code, message, data = json.loads(reply[1:])
            raise RpcError.rebuild(code, message, data)
        (hl,) = _LEN.unpack_from(reply, 1)
        phases = json.loads(reply[5:5 + hl])
        return Reply(reply[5 + hl:], phases, time.monotonic() - t0)
        yield  # pragma: no cover

    def call(self, target, endpoint, payload=b"", timeout=None, tag=None):
        return drive(self.call_ex(target, endpoint, payload, timeout, tag)).body
        yield  # pragma: no cover


class SocketTransport:
    """Same surface as :class:`~histore.transport.sim.SimTransport` on real sockets."""

    kind = "socket"

    def __init__(self, rt: ThreadRuntime | None = None, cfg: NetConfig | None = None,
                 timeout: float = 2.0, memory_budget: int = 8 << 30):
        self.rt = rt or ThreadRuntime()
        self.cfg = cfg or NetConfig()
        self.timeout = timeout
        self.memory_budget = memory_budget
        self.counters = TransportCounters()
        self._nodes: dict[int, _Node] = {}
        self._partitioned: set[int] = set()
        self._next_region = 1
        self._lock = threading.Lock()

    def add_node(self, node_id: int) -> None:
        if node_id in self._nodes:
            raise ValueError(f"node {node_id} already exists")
        self._nodes[node_id] = _Node(self, node_id)

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

    def register_region(self, node_id: int, size: int) -> MemRegion:
        if size <= 0:
            raise ValueError("region size must be > 0")
        node = self.node(node_id)
        with self._lock:
            if node.mem_used + size > self.memory_budget:
                raise OutOfMemory(f"node {node_id}: {size} bytes exceeds budget")
            region = MemRegion(self._next_region, node_id, size)
            self._next_region += 1
            node.regions[region.region_id] = region
            node.mem_used += size
        return region

    def region(self, node_id: int, region_id: int) -> MemRegion:
        return self.node(node_id)._region(region_id)

    def serve(self, node_id: int, endpoint: str, handler) -> None:
        self.node(node_id).endpoints[endpoint] = handler

    def inject_fault(self, kind: str, node_id: int) -> None:
        node = self.node(node_id)
        if kind == "crash":
            if not node.crashed:
                node.crashed = True
                node.close()
        elif kind == "partition":
            self._partitioned.add(node_id)
        elif kind == "heal":
            self._partitioned.discard(node_id)
        else:
            raise ValueError(f"unknown fault kind {kind!r}")

    def close(self) -> None:
        for node in self._nodes.values():
            if not node.crashed:
                node.close()
                node.crashed = True
