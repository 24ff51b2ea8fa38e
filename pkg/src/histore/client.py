"""Application-facing API.

GETs on a healthy group are pure one-sided reads of the primary's hash table.
Writes and scans are RPCs.  Every operation returns a :class:`PhaseTrace`
through the optional ``trace`` argument.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass

from histore.data_store import (
    DataServerInfo,
    read_item,
    read_items,
    store_item,
)
from histore.errors import (
    CorruptItem,
    GroupUnavailable,
    NotPrimary,
    Redirect,
    ScanUnavailable,
    StaleEpoch,
    TransportError,
    Unsupported,
    WriteNotAcked,
    WritePaused,
)
from histore.hash_index import HashTableLayout, client_lookup, key_hash
from histore.index_group import (
    GroupView,
    WriteRequest,
    decode_addr_reply,
    encode_get,
    encode_scan,
)
from histore.oplog import Kind
from histore.skiplist import decode_records, loser_tree_merge
from histore.trace import PhaseTrace

log = logging.getLogger(__name__)

RETRYABLE = (StaleEpoch, NotPrimary, WritePaused, WriteNotAcked, Redirect, TransportError)


@dataclass
class ClientParams:
    attempts: int = 5
    backoff: float | None = None  # default: 2 x rpc_rtt
    scan_batch: int = 32
    view_timeout: float | None = None


class ClusterView:
    """Client-side copy of the control plane's view."""

    def __init__(self, doc: dict):
        self.slices = doc["slices"]
        self.partitions = doc["partitions"]
        self.groups = {int(g["group_id"]): GroupView.from_dict(g) for g in doc["groups"]}
        self.data_servers = {d["tag"]: DataServerInfo.from_dict(d) for d in doc["data_servers"]}
        self.slice_owner = {}
        for g in self.groups.values():
            for s in g.hash_slice:
                self.slice_owner[s] = g.group_id
        self.layouts = {gid: (HashTableLayout.from_dict(g.hash_layout) if g.hash_layout else None)
                        for gid, g in self.groups.items()}

    def group_of(self, kh) -> GroupView:
        return self.groups[self.slice_owner[kh.group_index(self.slices)]]

    def to_dict(self) -> dict:
        return {"slices": self.slices, "partitions": self.partitions,
                "groups": [g.to_dict() for g in self.groups.values()],
                "data_servers": [d.to_dict() for d in self.data_servers.values()]}


class Client:
    def __init__(self, net, node_id: int, client_id: int, control_node: int = 0,
                 params: ClientParams | None = None, rng=None):
        self.net = net
        self.rt = net.rt
        self.node_id = node_id
        self.client_id = client_id
        self.control = control_node
        self.params = params or ClientParams()
        self.backoff = self.params.backoff if self.params.backoff is not None else 2 * net.cfg.rpc_rtt
        self.port = net.port(node_id)
        self.rng = rng or self.rt.rng
        self.view: ClusterView | None = None
        self._req = itertools.count(1)
        self._rr = itertools.count(client_id)
        self.retries = 0

    # -- view --------------------------------------------------------------------

    def connect(self):
        body = yield from self.port.call(self.control, "cluster_view", b"", tag="control",
                                         timeout=self.params.view_timeout)
        self.view = ClusterView(json.loads(body))
        return self.view

    def _refresh(self):
        try:
            yield from self.connect()
        except TransportError:
            pass

    def _servers(self):
        return self.view.data_servers

    def _pick_server(self, kh) -> DataServerInfo:
        servers = self.view.data_servers
        tags = sorted(servers)
        return servers[tags[kh % len(tags)]]

    def _read_item(self, trace: PhaseTrace | None, tag: str = "get"):
        def reader(addr, length):
            t0 = self.rt.now()
            out = yield from read_item(self.port, self.view.data_servers, addr, length, tag=tag)
            if trace is not None:
                trace.add("data_access", self.rt.now() - t0)
            return out
        return reader

    # -- writes --------------------------------------------------------------------

    def put(self, key: bytes, value: bytes, trace: PhaseTrace | None = None):
        yield from self._write(Kind.PUT, key, value, trace)

    def update(self, key: bytes, value: bytes, trace: PhaseTrace | None = None):
        yield from self._write(Kind.UPDATE, key, value, trace)

    def delete(self, key: bytes, trace: PhaseTrace | None = None):
        yield from self._write(Kind.DELETE, key, b"", trace)

    def _write(self, kind: Kind, key: bytes, value: bytes, trace: PhaseTrace | None):
        if self.view is None:
            yield from self.connect()
        rt = self.rt
        trace = trace if trace is not None else PhaseTrace()
        t_start = rt.now()
        kh = key_hash(key)
        addr = ilen = 0
        if kind != Kind.DELETE:
            server = self._pick_server(kh)
            addr, ilen, reply = yield from store_item(self.port, server, key, value, tag="put")
            trace.add_rpc(reply, "data_access")
        req = next(self._req)
        delay = self.backoff
        last = None
        for attempt in range(self.params.attempts):
            g = self.view.group_of(kh)
            t_try = rt.now()
            if not g.available or g.writer is None:
                last = GroupUnavailable(f"group {g.group_id} has no writer")
            else:
                wr = WriteRequest(g.epoch, self.client_id, req, kind, key, addr, ilen)
                try:
                    reply = yield from self.port.call_ex(g.writer, "write", wr.encode(), tag="write")
                    trace.add_rpc(reply, "index_rpc")
                    trace.total = rt.now() - t_start
                    return trace
                except RETRYABLE as exc:
                    last = exc
            self.retries += 1
            if attempt + 1 < self.params.attempts:
                yield from self._refresh()
                yield from rt.sleep(delay)
                delay *= 2
            trace.add("index_rpc", rt.now() - t_try)
        raise GroupUnavailable(f"write of {key!r} failed after {self.params.attempts} attempts: {last!r}")

    # -- point reads -----------------------------------------------------------------

    def get(self, key: bytes, trace: PhaseTrace | None = None):
        """Generator returning the value or None."""
        if self.view is None:
            yield from self.connect()
        rt = self.rt
        trace = trace if trace is not None else PhaseTrace()
        t_start = rt.now()
        kh = key_hash(key)
        delay = self.backoff
        last = None
        for attempt in range(self.params.attempts):
            g = self.view.group_of(kh)
            layout = self.view.layouts.get(g.group_id)
            t_try = rt.now()
            d0 = trace.data_access
            try:
                if layout is not None and not g.degraded:
                    res, _ = yield from client_lookup(self.port, layout, key,
                                                      self._read_item(trace), kh=kh, tag="get")
                    trace.add("index_access", rt.now() - t_try - (trace.data_access - d0))
                    trace.total = rt.now() - t_start
                    trace.extra["path"] = "one_sided"
                    return None if res is None else res.value
                value = yield from self._get_rpc(g, key, trace)
                trace.total = rt.now() - t_start
                trace.extra["path"] = "rpc"
                return value
            except (Unsupported,) as exc:
                raise GroupUnavailable(str(exc)) from None
            except RETRYABLE as exc:
                last = exc
            self.retries += 1
            if attempt + 1 < self.params.attempts:
                yield from self._refresh()
                yield from rt.sleep(delay)
                delay *= 2
            trace.add("index_rpc", rt.now() - t_try - (trace.data_access - d0))
        raise GroupUnavailable(f"get of {key!r} failed: {last!r}")

    def _get_rpc(self, g: GroupView, key: bytes, trace: PhaseTrace):
        nodes = g.get_nodes if g.get_nodes else g.members
        if not nodes:
            raise GroupUnavailable(f"group {g.group_id} has no live index node")
        target = nodes[self.rng.randrange(len(nodes))]
        endpoint = "get_degraded" if g.degraded else "get"
        reply = yield from self.port.call_ex(target, endpoint, encode_get(g.epoch, key), tag="get")
        trace.add_rpc(reply, "index_rpc")
        hit = decode_addr_reply(reply.body)
        if hit is None:
            return None
        ikey, value = yield from self._read_item(trace)(*hit)
        if ikey != key:
            raise CorruptItem(f"index entry for {key!r} points at item of {ikey!r}")
        return value

    # -- scans -----------------------------------------------------------------------

    def _scan_group(self, gid: int, lo: bytes, count: int):
        """Generator returning (records, reply) from one backup of group ``gid``."""
        rt = self.rt
        delay = self.backoff
        last = None
        for attempt in range(self.params.attempts):
            g = self.view.groups[gid]
            if self.view.groups[gid].mode == "all-hash":
                raise ScanUnavailable("all-hash mode keeps no sorted index")
            nodes = list(g.scan_nodes)
            if not nodes:
                raise ScanUnavailable(f"group {gid} has no node serving scans")
            target = nodes[(next(self._rr) + attempt) % len(nodes)]
            try:
                reply = yield from self.port.call_ex(target, "scan", encode_scan(g.epoch, lo, count),
                                                     tag="scan")
                return decode_records(reply.body), reply
            except Unsupported as exc:
                raise ScanUnavailable(str(exc)) from None
            except RETRYABLE as exc:
                last = exc
            self.retries += 1
            if attempt + 1 < self.params.attempts:
                yield from self._refresh()
                yield from rt.sleep(delay)
                delay *= 2
        raise ScanUnavailable(f"group {gid} scan failed: {last!r}")

    def scan(self, start: bytes, count: int = 100, trace: PhaseTrace | None = None):
        """Generator returning [(key, value)] for the ``count`` smallest keys >= start."""
        if count < 1:
            raise ValueError("count must be >= 1")
        if self.view is None:
            yield from self.connect()
        rt = self.rt
        trace = trace if trace is not None else PhaseTrace()
        t_start = rt.now()
        gids = sorted(self.view.groups)
        if len(gids) == 1:
            results = [(yield from self._scan_group(gids[0], start, count))]
        else:
            tasks = [rt.spawn(self._scan_group(gid, start, count), name=f"scan-g{gid}") for gid in gids]
            results = []
            for ok, res in (yield from rt.wait_all(tasks)):
                if not ok:
                    raise res
                results.append(res)
        t_index = rt.now()
        slowest = max(results, key=lambda r: r[1].elapsed)[1]
        trace.add_rpc(slowest, "index_rpc")
        trace.add("index_rpc", (t_index - t_start) - slowest.elapsed)
        merged = []
        for rec in loser_tree_merge([r for r, _ in results]):
            merged.append(rec)
            if len(merged) == count:
                break
        out = []
        t0 = rt.now()
        b = self.params.scan_batch
        for i in range(0, len(merged), b):
            part = merged[i:i + b]
            items = yield from read_items(self.port, self.view.data_servers,
                                          [(a, n) for _, a, n in part], tag="scan")
            for (key, _, _), (ikey, value) in zip(part, items):
                if ikey != key:
                    raise CorruptItem(f"scan entry for {key!r} points at item of {ikey!r}")
                out.append((key, value))
        trace.add("data_access", rt.now() - t0)
        trace.total = rt.now() - t_start
        return out
