"""Index microbenchmarks: memory accesses per lookup and RPC contention."""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from histore.bench.workloads import db_key
from histore.hash_index import HashTable, HashTableLayout, key_hash
from histore.runtime import SimRuntime
from histore.skiplist import Skiplist
from histore.transport.base import US, MemRegion, NetConfig
from histore.transport.sim import SimTransport

DEFAULT_KEY_COUNTS = (10_000, 100_000, 1_000_000)
DEFAULT_CLIENTS = (4, 8, 16, 32, 64)


def _build_hash(n: int, load: float = 0.7) -> HashTable:
    buckets, overflow = HashTableLayout.size_for(n, load)
    layout = HashTableLayout(0, 1, buckets, overflow)
    table = HashTable(MemRegion(1, 0, layout.region_bytes), layout)
    for i in range(n):
        k = db_key(i)
        table.apply_put(k, key_hash(k), 48, i + 1)
    return table


def _build_skiplist(n: int, seed: int) -> Skiplist:
    sl = Skiplist(random.Random(seed))
    sl.bulk_load((db_key(i), i + 1, 48) for i in range(n))
    return sl


@dataclass
class AccessRow:
    index: str
    keys: int
    mean: float
    lookups: int


def run_index_microbench(index: str, key_counts=DEFAULT_KEY_COUNTS, lookups: int = 20_000,
                         seed: int = 0, load: float = 0.7) -> list[AccessRow]:
    """Mean one-sided accesses per uniform lookup for each key count.

    Hash: buckets read until the slot holding the key is found.  Skiplist:
    distinct nodes whose key the traversal compares.
    """
    if index not in ("hash", "skiplist"):
        raise ValueError(f"unknown index {index!r}")
    rows = []
    for n in key_counts:
        rng = np.random.default_rng(seed + n)
        picks = rng.integers(0, n, size=max(1, lookups))
        if index == "hash":
            table = _build_hash(n, load)
            total = sum(table.bucket_reads_for(db_key(int(i))) for i in picks)
        else:
            sl = _build_skiplist(n, seed)
            total = 0
            for i in picks:
                found, visits = sl.search(db_key(int(i)))
                assert found is not None
                total += max(1, visits)
        rows.append(AccessRow(index, n, total / len(picks), len(picks)))
    return rows


# ---------------------------------------------------------------------------
# contention
# ---------------------------------------------------------------------------


@dataclass
class ContentionRow:
    path: str
    clients: int
    mean: float  # seconds
    oracle: float | None = None
    service: float | None = None


def queueing_oracle(clients: int, think: float, service: float, servers: int) -> float:
    """Closed system with deterministic times: R = max(Z + S, c * S / m)."""
    return max(think + service, clients * service / servers)


class _IndexServer:
    """One index node holding both a hash table region and a skiplist."""

    SERVER = 1

    def __init__(self, net: SimTransport, keys: int, seed: int, visit_cost: float):
        self.net = net
        net.add_node(self.SERVER)
        buckets, overflow = HashTableLayout.size_for(keys)
        region = net.register_region(self.SERVER, (buckets + overflow) * 64)
        self.layout = HashTableLayout(self.SERVER, region.region_id, buckets, overflow)
        self.table = HashTable(region, self.layout)
        for i in range(keys):
            k = db_key(i)
            self.table.apply_put(k, key_hash(k), 48, i + 1)
        self.sl = _build_skiplist(keys, seed)
        self.visit_cost = visit_cost
        self.visits = 0
        self.lookups = 0
        net.serve(self.SERVER, "lookup", self.handle_lookup)

    def handle_lookup(self, payload: bytes, ctx):
        found, visits = self.sl.search(payload)
        self.visits += visits
        self.lookups += 1
        yield from ctx.compute(visits * self.visit_cost)
        return b"\x01" if found else b"\x00"


def run_contention_bench(path: str, clients=DEFAULT_CLIENTS, cfg: NetConfig | None = None,
                         keys: int = 100_000, ops_per_client: int = 200, seed: int = 0,
                         visit_cost: float = 0.025 * US) -> list[ContentionRow]:
    """Indexing latency per client count for ``hash-one-sided`` or ``skiplist-rpc``.

    Each client runs closed-loop lookups of uniform keys against one server.
    Only the index step is timed.
    """
    if path not in ("hash-one-sided", "skiplist-rpc"):
        raise ValueError(f"unknown contention path {path!r}")
    cfg = cfg or NetConfig()
    rows = []
    for c in clients:
        rt = SimRuntime(seed)
        net = SimTransport(rt, cfg)
        server = _IndexServer(net, keys, seed, visit_cost)
        lat: list[float] = []

        def client(i: int):
            node = 100 + i
            port = net.port(node)
            rng = np.random.default_rng((seed << 16) + i)
            for k in rng.integers(0, keys, size=ops_per_client):
                key = db_key(int(k))
                t0 = rt.now()
                if path == "hash-one-sided":
                    kh = key_hash(key)
                    yield from port.read(server.SERVER, server.layout.region_id,
                                         server.layout.bucket_offset(kh), 64, tag="get")
                else:
                    yield from port.call(server.SERVER, "lookup", key, tag="scan")
                lat.append(rt.now() - t0)

        for i in range(c):
            net.add_node(100 + i)

        def main():
            tasks = [rt.spawn(client(i), name=f"c{i}") for i in range(c)]
            yield from rt.wait_all(tasks)

        rt.run(main())
        # drop the first round: every client starts at t=0, so it is all queueing transient
        steady = lat[c:] if len(lat) > c else lat
        mean = float(np.mean(steady))
        if path == "hash-one-sided":
            rows.append(ContentionRow(path, c, mean))
            continue
        service = cfg.per_request_cpu_cost + visit_cost * server.visits / server.lookups
        # the think time is everything outside the server: round trip plus posting the send
        oracle = queueing_oracle(c, cfg.rpc_rtt + cfg.issue_cost, service, cfg.rpc_threads_per_node)
        rows.append(ContentionRow(path, c, mean, oracle, service))
    return rows


def crossover(rows: list[ContentionRow], cfg: NetConfig | None = None) -> float:
    """Client count where the skiplist-RPC path starts to queue (from the oracle)."""
    cfg = cfg or NetConfig()
    s = float(np.mean([r.service for r in rows if r.service]))
    return cfg.rpc_threads_per_node * (cfg.rpc_rtt + cfg.issue_cost + s) / s


__all__ = ["run_index_microbench", "run_contention_bench", "queueing_oracle", "crossover",
           "AccessRow", "ContentionRow"]
