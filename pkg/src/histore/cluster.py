"""Bootstrap a cluster from a topology and give tests/benches a handle on it."""

from __future__ import annotations

import json
import logging
import random
import struct
from dataclasses import dataclass, field, replace

from histore.config import Topology, default_topology
from histore.data_store import DataServer, encode_item
from histore.errors import ConfigError, CorruptItem, HiStoreError, TransportError
from histore.client import Client, ClientParams
from histore.hash_index import key_hash
from histore.index_group import IndexNode, Role
from histore.recovery import ControlPlane
from histore.runtime import SimRuntime, ThreadRuntime
from histore.skiplist import decode_records
from histore.transport.sim import SimTransport
from histore.transport.sockets import SocketTransport

log = logging.getLogger(__name__)

CLIENT_NODE_BASE = 1000
DATA_REGION_BYTES = 256 << 20


@dataclass
class QuiesceReport:
    group: int
    maps: dict = field(default_factory=dict)  # node -> {key: (addr, len)}
    roles: dict = field(default_factory=dict)
    divergences: list = field(default_factory=list)
    dangling: list = field(default_factory=list)
    oracle_diff: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.divergences or self.dangling or self.oracle_diff)

    def summary(self) -> str:
        sizes = {n: len(m) for n, m in self.maps.items()}
        return (f"group {self.group}: sizes={sizes} divergences={self.divergences[:5]} "
                f"dangling={self.dangling[:5]} oracle_diff={self.oracle_diff[:5]}")


def _diff(a: dict, b: dict, limit: int = 20) -> list:
    out = []
    for k in sorted(set(a) | set(b)):
        if a.get(k) != b.get(k):
            out.append((k, a.get(k), b.get(k)))
            if len(out) >= limit:
                break
    return out


class Cluster:
    def __init__(self, topology: Topology | None = None, mode: str | None = None,
                 seed: int | None = None, rt=None, net=None,
                 data_region_bytes: int = DATA_REGION_BYTES):
        self.topology = topology or default_topology()
        self.mode = mode or self.topology.mode
        self.seed = self.topology.seed if seed is None else seed
        self.params = self.topology.params
        self.backend = self.topology.backend if net is None else net.kind
        if self.backend == "socket" and net is None:
            # real clocks: the virtual-time batching and ack deadlines are far too tight
            self.params = replace(self.params, batch_delay=200e-6, write_wait=0.5,
                                  retry_delay=1e-3, idle_tick=0.02)
            rt = rt or ThreadRuntime(self.seed)
            net = SocketTransport(rt, self.topology.net)
        if rt is None:
            rt = SimRuntime(self.seed)
        self.rt = rt
        self.net = net if net is not None else SimTransport(rt, self.topology.net)
        self.data_region_bytes = data_region_bytes
        self.index_nodes: dict[int, IndexNode] = {}
        self.data_servers: list[DataServer] = []
        self.control: ControlPlane | None = None
        self.clients: list[Client] = []
        self.bootstrapped = False
        self._next_index_id = None

    # -- bootstrap --------------------------------------------------------------

    def bootstrap(self) -> "Cluster":
        if self.bootstrapped:
            raise HiStoreError("cluster already bootstrapped")
        topo = self.topology
        topo.mode = self.mode
        topo.validate()
        for n in topo.nodes:
            self.net.add_node(n.node_id)
        for tag, nid in enumerate(topo.data_nodes, start=1):
            self.data_servers.append(DataServer(self.net, nid, tag, self.data_region_bytes,
                                                topo.costs))
        self.control = ControlPlane(self, topo.control_node)
        for g in topo.groups:
            for nid in g.members:
                self.index_nodes[nid] = IndexNode(self.net, nid, g, self.mode, self.params,
                                                  seed=self.seed)
        for g in topo.groups:
            view = self.control.install(g)
            self.index_nodes[g.primary].start(Role.PRIMARY, view)
        for g in topo.groups:
            view = self.control.groups[g.group_id].view
            for b in g.backups:
                self.index_nodes[b].start(Role.BACKUP, view)
        # the layout is only known once the primary made its table
        for g in topo.groups:
            st = self.control.groups[g.group_id]
            st.view = self.control.make_view(g, 1, g.primary, Role.PRIMARY, g.backups)
            for nid in g.members:
                self.index_nodes[nid].view = st.view
        self._next_index_id = max(n.node_id for n in topo.nodes) + 1
        self.bootstrapped = True
        return self

    def add_index_node(self, gid: int) -> int:
        """Provision an empty index node for a rebuild."""
        nid = self._next_index_id
        while self.net.has_node(nid) or nid >= CLIENT_NODE_BASE:
            nid += 1
        if nid >= CLIENT_NODE_BASE:
            raise ConfigError("out of index node ids")
        self._next_index_id = nid + 1
        self.net.add_node(nid)
        cfg = self.control.groups[gid].config
        self.index_nodes[nid] = IndexNode(self.net, nid, cfg, self.mode, self.params, seed=self.seed)
        return nid

    def client(self, params: ClientParams | None = None) -> Client:
        i = len(self.clients)
        nid = CLIENT_NODE_BASE + i
        self.net.add_node(nid)
        c = Client(self.net, nid, i + 1, self.topology.control_node, params)
        c.rng = random.Random((self.seed << 20) + i)
        self.clients.append(c)
        return c

    def connect_all(self):
        for c in self.clients:
            yield from c.connect()

    # -- helpers ----------------------------------------------------------------

    def run(self, gen):
        return self.rt.run(gen)

    def group_of(self, key: bytes) -> int:
        kh = key_hash(key)
        return self.topology.group_for_slice()[kh.group_index(self.topology.slices)]

    def view(self, gid: int = 0):
        return self.control.groups[gid].view

    def server_for_tag(self, tag: int) -> DataServer:
        return self.data_servers[tag - 1]

    def deref(self, addr: int, length: int) -> tuple[bytes, bytes]:
        return self.server_for_tag(addr >> 40).local_read(addr, length)

    def crash(self, node: int) -> None:
        self.net.inject_fault("crash", node)

    def close(self) -> None:
        """Stop background loops and release sockets (socket backend)."""
        for node in self.index_nodes.values():
            node.stop()
        if self.control is not None:
            self.control.stop_monitor()
        if hasattr(self.net, "close"):
            self.net.close()

    def preload(self, items):
        """Load (key, value) pairs straight into every index, bypassing the protocol.

        Used to set up large benches quickly.  Returns the number of keys.
        """
        groups: dict[int, dict] = {}
        P = self.params.partitions
        slices = self.topology.slices
        owner = self.topology.group_for_slice()
        nds = len(self.data_servers)
        for key, value in items:
            kh = key_hash(key)
            ds = self.data_servers[kh % nds]
            item = encode_item(key, value)
            addr = ds.append(item)
            groups.setdefault(owner[kh.group_index(slices)], {})[key] = (addr, len(item))
        for gid, m in groups.items():
            view = self.view(gid)
            ordered = sorted((k, a, n) for k, (a, n) in m.items())
            for nid in view.members:
                node = self.index_nodes[nid]
                if node.hash is not None:
                    for k, a, n in ordered:
                        node.hash.apply_put(k, key_hash(k), n, a)
                else:
                    if len(node.sl):
                        for k, a, n in ordered:
                            node.sl.put(k, a, n)
                    else:
                        node.sl.bulk_load(ordered)
            assert P == self.index_nodes[view.members[0]].P
        return sum(len(m) for m in groups.values())

    # -- quiescence ---------------------------------------------------------------

    def settle(self, timeout: float = 0.05):
        """Wait until every live writer has committed everything it logged."""
        rt = self.rt
        deadline = rt.now() + timeout
        while rt.now() < deadline:
            pending = False
            for gid, st in self.control.groups.items():
                w = st.view.writer
                if w is None or self.net.is_crashed(w):
                    continue
                node = self.index_nodes[w]
                if any(lp.commit_watermark < lp.append_seq for lp in node.log.parts):
                    pending = True
            if not pending:
                return True
            yield from rt.sleep(20e-6)
        return False

    def quiesce_check(self, gid: int = 0, oracle: dict | None = None, port=None):
        """Generator returning a :class:`QuiesceReport` for group ``gid``.

        ``oracle`` maps key -> value; index entries are dereferenced through the
        data servers and compared with it.
        """
        yield from self.settle()
        port = port or self.net.port(self.topology.control_node)
        st = self.control.groups[gid]
        report = QuiesceReport(gid)
        for nid in st.view.members:
            try:
                body = yield from port.call(nid, "quiesce_check", b"", timeout=1.0, tag="control")
            except (TransportError, HiStoreError) as exc:
                report.divergences.append((nid, f"unreachable: {exc!r}"))
                continue
            (hl,) = struct.unpack_from("<I", body)
            info = json.loads(body[4:4 + hl])
            report.roles[nid] = info["role"]
            report.maps[nid] = {k: (a, n) for k, a, n in decode_records(body[4 + hl:])}
        nodes = list(report.maps)
        for other in nodes[1:]:
            d = _diff(report.maps[nodes[0]], report.maps[other])
            if d:
                report.divergences.append((nodes[0], other, d))
        if nodes:
            for key, (addr, n) in report.maps[nodes[0]].items():
                try:
                    ikey, _ = self.deref(addr, n)
                except (CorruptItem, IndexError, HiStoreError) as exc:
                    report.dangling.append((key, addr, repr(exc)))
                    continue
                if ikey != key:
                    report.dangling.append((key, addr, ikey))
            if oracle is not None:
                got = {}
                for key, (addr, n) in report.maps[nodes[0]].items():
                    try:
                        got[key] = self.deref(addr, n)[1]
                    except HiStoreError:
                        got[key] = None
                mine = {k: v for k, v in oracle.items() if self.group_of(k) == gid}
                report.oracle_diff = _diff(got, mine)
        return report

    def quiesce_all(self, oracle: dict | None = None):
        reports = []
        for gid in sorted(self.control.groups):
            reports.append((yield from self.quiesce_check(gid, oracle)))
        return reports


def make_cluster(mode: str = "hybrid", seed: int = 0, groups: int = 1, capacity: int = 200_000,
                 topology: Topology | None = None, **kw) -> Cluster:
    """Convenience: bootstrap a simulated cluster."""
    topo = topology or default_topology(groups=groups, capacity=capacity)
    return Cluster(topo, mode=mode, seed=seed, **kw).bootstrap()
