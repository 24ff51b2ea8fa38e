"""Fault schedules, degraded-mode ratios, recovery timing and the split-index hazard.

A schedule file is TOML with one ``[[schedule]]`` table per run::

    [[schedule]]
    name = "primary-crash"
    target = "primary"          # primary | backup | rebuild-target
    at_op = 1500                # crash when this many ops have been issued
    ops = 6000
    preload = 10000
    clients = 8
    heartbeat_us = 200          # failure detector period
    rebuild = true
    mix = { get = 0.5, put = 0.3, scan = 0.2 }
"""

from __future__ import annotations

import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from histore.bench.harness import _phase, ensure_clients
from histore.bench.workloads import WorkloadSpec, value_for
from histore.cluster import make_cluster
from histore.errors import ConfigError, HiStoreError, NodeDown
from histore.hash_index import HashTable, HashTableLayout, key_hash
from histore.runtime import SimRuntime
from histore.skiplist import Skiplist
from histore.transport.sim import SimTransport

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

TARGETS = ("primary", "backup", "rebuild-target")


@dataclass
class FaultSchedule:
    name: str
    target: str = "primary"
    at_op: int = 1500
    ops: int = 6000
    preload: int = 10_000
    clients: int = 8
    heartbeat_us: float = 200.0
    rebuild: bool = True
    mix: dict = field(default_factory=lambda: {"get": 0.5, "put": 0.3, "scan": 0.2})
    bucket_us: float = 100.0

    def validate(self) -> "FaultSchedule":
        if self.target not in TARGETS:
            raise ConfigError(f"schedule {self.name}: target must be one of {TARGETS}")
        if not 0 <= self.at_op <= self.ops:
            raise ConfigError(f"schedule {self.name}: at_op outside [0, ops]")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ConfigError(f"schedule {self.name}: mix must sum to 1")
        for k in self.mix:
            if k not in ("get", "put", "scan", "delete"):
                raise ConfigError(f"schedule {self.name}: unsupported op {k!r}")
        return self


DEFAULT_SCHEDULES = (
    FaultSchedule("primary-crash", "primary"),
    FaultSchedule("backup-crash", "backup"),
    FaultSchedule("crash-during-rebuild", "rebuild-target"),
)


def load_schedules(path) -> list[FaultSchedule]:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    out = []
    for i, d in enumerate(doc.get("schedule", [])):
        try:
            out.append(FaultSchedule(**d).validate())
        except TypeError as exc:
            raise ConfigError(f"schedule[{i}]: {exc}") from None
    if not out:
        raise ConfigError(f"{path}: no [[schedule]] tables")
    return out


# ---------------------------------------------------------------------------
# scheduled runs
# ---------------------------------------------------------------------------


@dataclass
class ScheduleReport:
    name: str
    mode: str
    crash_at: float | None = None
    timeline: list = field(default_factory=list)  # (bucket start, op, ok, failed)
    ops: dict = field(default_factory=dict)  # op -> (ok, failed)
    lost_writes: list = field(default_factory=list)
    quiesce_ok: bool = False
    quiesce_summary: str = ""
    recoveries: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def availability(self, op: str) -> float:
        ok, failed = self.ops.get(op, (0, 0))
        return ok / (ok + failed) if ok + failed else 1.0


def _check_writes(cluster, report, maps: dict, allowed: dict) -> None:
    """Every acked write is in the index; nothing else but failed writes is."""
    final = next(iter(maps.values()), {})
    for key, ok_values in allowed.items():
        got = final.get(key)
        value = cluster.deref(*got)[1] if got is not None else None
        if value not in ok_values:
            report.lost_writes.append((key, value, sorted(map(repr, ok_values))[:3]))


def run_schedule(sched: FaultSchedule, mode: str = "hybrid", seed: int = 0) -> ScheduleReport:
    """Run one schedule on a fresh simulated cluster."""
    sched.validate()
    cluster = make_cluster(mode, seed=seed, capacity=max(4096, 2 * (sched.preload + sched.ops)))
    rt = cluster.rt
    report = ScheduleReport(sched.name, mode)
    spec = WorkloadSpec(preload=sched.preload)
    cluster.preload((spec.key(i), value_for(i, 32)) for i in range(sched.preload))
    clients = ensure_clients(cluster, sched.clients)
    control = cluster.control
    gid = 0
    view = cluster.view(gid)
    victim = {"primary": view.writer, "backup": view.backups[-1]}.get(sched.target)
    issued = [0]
    crashed = rt.signal()
    events: list = []
    # key -> values it may hold at the end: last acked value plus later unacked writes
    allowed: dict[bytes, set] = {}
    initial = {spec.key(i): value_for(i, 32) for i in range(sched.preload)}
    kinds = list(sched.mix)
    probs = np.array([sched.mix[k] for k in kinds])

    def body(c):
        rng = np.random.default_rng((seed << 8) + c.client_id)
        # writes go to the client's own key stripe, so per-key order is program order
        while issued[0] < sched.ops:
            issued[0] += 1
            if issued[0] == sched.at_op and not crashed.is_set:
                crashed.set(rt.now())
            kind = kinds[int(rng.choice(len(kinds), p=probs))]
            i = int(rng.integers(0, max(1, sched.preload)))
            t0 = rt.now()
            ok = True
            try:
                if kind == "get":
                    yield from c.get(spec.key(i))
                elif kind == "scan":
                    yield from c.scan(spec.key(i), 100)
                else:
                    j = i - i % sched.clients + (c.client_id - 1) % sched.clients
                    if j >= sched.preload:
                        j -= sched.clients
                    key = spec.key(j)
                    if key not in allowed:
                        allowed[key] = {initial.get(key)}
                    v = value_for(j, 32, salt=issued[0]) if kind == "put" else None
                    allowed[key].add(v)
                    if kind == "put":
                        yield from c.put(key, v)
                    else:
                        yield from c.delete(key)
                    allowed[key] = {v}
            except NodeDown:
                return
            except HiStoreError as exc:
                ok = False
                log.debug("%s failed: %r", kind, exc)
            events.append((t0, rt.now(), kind, ok))

    def fault():
        t_crash = yield from crashed.wait()
        report.crash_at = t_crash
        if sched.target == "rebuild-target":
            # lose the primary, then lose the node rebuilding it halfway through
            cluster.crash(view.writer)
            yield from control.fail_over_primary(gid)
            new = cluster.add_index_node(gid)
            task = rt.spawn(control.rebuild_primary(gid, new), name="rebuild")
            yield from rt.sleep(5e-6)
            cluster.crash(new)
            report.notes.append(f"crashed rebuild target {new}")
            ok, rec = (yield from rt.wait_all([task]))[0]
            if not ok:
                raise rec
            report.recoveries.append(rec)
            return
        cluster.crash(victim)
        # failure detector: heartbeats every period, three misses
        yield from rt.sleep(3 * sched.heartbeat_us * 1e-6)
        yield from control.handle_failure(victim)
        if not sched.rebuild:
            return
        if sched.target == "primary":
            report.recoveries.append((yield from control.rebuild_primary(gid)))
        else:
            report.recoveries.append((yield from control.rebuild_backup(gid)))

    def main():
        for c in clients:
            yield from c.connect()
        ftask = rt.spawn(fault(), name="fault")
        tasks = [rt.spawn(body(c), name=f"client{c.client_id}") for c in clients]
        yield from rt.wait_all(tasks)
        if not crashed.is_set:
            crashed.set(rt.now())
        res = yield from rt.wait_all([ftask])
        if not res[0][0]:
            raise res[0][1]
        rep = yield from cluster.quiesce_check(gid)
        return rep

    qrep = cluster.run(main())
    report.quiesce_ok = qrep.ok
    report.quiesce_summary = qrep.summary()
    _check_writes(cluster, report, qrep.maps, allowed)
    bucket = sched.bucket_us * 1e-6
    counts: dict = defaultdict(lambda: [0, 0])
    per_op: dict = defaultdict(lambda: [0, 0])
    for _t0, t1, kind, ok in events:
        counts[(int(t1 / bucket), kind)][0 if ok else 1] += 1
        per_op[kind][0 if ok else 1] += 1
    report.timeline = [(b * bucket, k, v[0], v[1]) for (b, k), v in sorted(counts.items())]
    report.ops = {k: tuple(v) for k, v in per_op.items()}
    return report


# ---------------------------------------------------------------------------
# degraded mode
# ---------------------------------------------------------------------------


@dataclass
class DegradedRow:
    state: str
    op: str
    throughput: float
    mean: float
    throughput_ratio: float
    latency_ratio: float


def _measure(cluster, clients, n, seed, preload, spec):
    out = {}
    for op in ("get", "put", "scan"):
        def make(c, rng, op=op):
            i = int(rng.integers(0, preload))
            k = spec.key(i)
            if op == "get":
                return "get", lambda tr: c.get(k, tr)
            if op == "scan":
                return "scan", lambda tr: c.scan(k, 100, tr)
            v = value_for(i, 32, salt=int(rng.integers(1, 1 << 30)))
            return "put", lambda tr: c.put(k, v, tr)
        count = n if op != "scan" else max(1, n // 10)
        rec, el = _phase(cluster, clients, count, make, seed)
        out[op] = (rec, el)
    return out


def degraded_ratios(mode: str = "hybrid", seed: int = 0, preload: int = 10_000,
                    ops: int = 4000, clients: int = 8) -> tuple[list[DegradedRow], dict]:
    """Throughput and latency per op in normal, backup-down and primary-down states.

    Returns the rows and a dict of extra observations (errors per state and
    whether degraded GETs matched the pre-crash values).
    """
    spec = WorkloadSpec(preload=preload)
    rows: list[DegradedRow] = []
    extra: dict = {}
    base = None
    for state in ("normal", "backup-down", "primary-down"):
        cluster = make_cluster(mode, seed=seed, capacity=max(4096, 2 * preload))
        cluster.preload((spec.key(i), value_for(i, 32)) for i in range(preload))
        cl = ensure_clients(cluster, clients)
        view = cluster.view(0)

        def prepare(state=state, cluster=cluster, view=view):
            if state == "backup-down":
                cluster.crash(view.backups[-1])
                yield from cluster.control.remove_backup(0, view.backups[-1])
            elif state == "primary-down":
                cluster.crash(view.writer)
                yield from cluster.control.fail_over_primary(0)
            for c in cl:
                yield from c.connect()

        cluster.run(prepare())
        if state == "primary-down":
            extra["degraded_get_matches"] = cluster.run(_check_gets(cl[0], spec, preload))
        res = _measure(cluster, cl, ops, seed, preload, spec)
        errors = {}
        for op, (rec, el) in res.items():
            errors[op] = rec.errors.get(op, 0)
            thr = len(rec.lat[op]) / el if el else 0.0
            mean = rec.mean_latency(op)
            if state == "normal":
                base = base or {}
                base[op] = (thr, mean)
            bt, bl = base[op]
            rows.append(DegradedRow(state, op, thr, mean, thr / bt if bt else float("nan"),
                                    mean / bl if bl else float("nan")))
        extra[f"errors:{state}"] = errors
    return rows, extra


def _check_gets(client, spec, preload, sample: int = 200):
    rng = random.Random(7)
    for _ in range(sample):
        i = rng.randrange(preload)
        got = yield from client.get(spec.key(i))
        if got != value_for(i, 32):
            return False
    return True


# ---------------------------------------------------------------------------
# recovery timing
# ---------------------------------------------------------------------------


def recovery_durations(key_counts=(10_000, 100_000, 1_000_000), mode: str = "hybrid",
                       seed: int = 0) -> list[tuple[int, str, float]]:
    """(keys, role, duration) for a primary rebuild and a backup rebuild per key count."""
    rows = []
    for n in key_counts:
        spec = WorkloadSpec(preload=n)
        items = [(spec.key(i), value_for(i, 32)) for i in range(n)]
        for role in ("primary", "backup"):
            cluster = make_cluster(mode, seed=seed, capacity=max(4096, n + n // 4))
            cluster.preload(items)
            view = cluster.view(0)

            def go(role=role, cluster=cluster, view=view):
                if role == "primary":
                    cluster.crash(view.writer)
                    yield from cluster.control.fail_over_primary(0)
                    return (yield from cluster.control.rebuild_primary(0))
                dead = view.backups[-1]
                cluster.crash(dead)
                yield from cluster.control.remove_backup(0, dead)
                return (yield from cluster.control.rebuild_backup(0))

            rec = cluster.run(go())
            rows.append((n, role, rec.duration))
    return rows


# ---------------------------------------------------------------------------
# split-index hazard
# ---------------------------------------------------------------------------


class SplitIndexStore:
    """The naive layout: hash table and skiplist on two servers, no shared log.

    A client updates the hash table and then the skiplist with two separate
    RPCs.  Nothing ties the two updates together.
    """

    HASH_NODE, SKIPLIST_NODE = 1, 2

    def __init__(self, net: SimTransport, capacity: int = 4096):
        self.net = net
        for n in (self.HASH_NODE, self.SKIPLIST_NODE):
            net.add_node(n)
        buckets, overflow = HashTableLayout.size_for(capacity)
        region = net.register_region(self.HASH_NODE, (buckets + overflow) * 64)
        self.hash = HashTable(region, HashTableLayout(self.HASH_NODE, region.region_id,
                                                       buckets, overflow))
        self.sl = Skiplist(random.Random(0))
        net.serve(self.HASH_NODE, "apply", self._apply_hash)
        net.serve(self.SKIPLIST_NODE, "apply", self._apply_sl)

    @staticmethod
    def _decode(payload: bytes):
        addr = int.from_bytes(payload[:8], "little")
        return payload[8:], addr

    def _apply_hash(self, payload, ctx):
        key, addr = self._decode(payload)
        if addr:
            self.hash.apply_put(key, key_hash(key), 48, addr)
        else:
            self.hash.apply_delete(key)
        return b""
        yield  # pragma: no cover

    def _apply_sl(self, payload, ctx):
        key, addr = self._decode(payload)
        if addr:
            self.sl.insert(key, addr, 48)
        else:
            self.sl.delete(key)
        return b""
        yield  # pragma: no cover

    def put(self, port, key: bytes, addr: int):
        payload = addr.to_bytes(8, "little") + key
        yield from port.call(self.HASH_NODE, "apply", payload)
        yield from port.call(self.SKIPLIST_NODE, "apply", payload)

    def maps(self) -> tuple[dict, dict]:
        h = {k: a for k, a, _ in self.hash.entries()}
        s = {k: a for k, a, _ in self.sl.items()}
        return h, s


def _hazard_ops(rng: random.Random, n: int, keys: int):
    return [(b"hz%04d" % rng.randrange(keys), rng.randrange(1, 1 << 40) if rng.random() < 0.8 else 0)
            for _ in range(n)]


def split_index_trial(seed: int, crash_at: float, ops: int = 40, keys: int = 16) -> bool:
    """Run writes on the split layout and crash the client at ``crash_at``.

    Returns True when the two indexes disagree afterwards.
    """
    rt = SimRuntime(seed)
    net = SimTransport(rt)
    store = SplitIndexStore(net)
    net.add_node(100)
    port = net.port(100)
    work = _hazard_ops(random.Random(seed), ops, keys)

    def client():
        for key, addr in work:
            yield from store.put(port, key, addr)

    def killer():
        yield from rt.sleep(crash_at)
        net.inject_fault("crash", 100)

    def main():
        t = rt.spawn(client(), name="client")
        rt.spawn(killer(), name="killer")
        yield from rt.wait_all([t])
        yield from rt.sleep(1e-3)  # let in-flight requests land

    rt.run(main())
    h, s = store.maps()
    return h != s


def group_trial(seed: int, crash_at: float, crash: str, mode: str = "hybrid", ops: int = 40,
                keys: int = 16, clients: int = 2):
    """Same writes through an index group; crash the client or the primary mid-run.

    Returns the quiesce report of the surviving members.
    """
    cluster = make_cluster(mode, seed=seed, capacity=4096)
    rt = cluster.rt
    cl = ensure_clients(cluster, clients)
    work = _hazard_ops(random.Random(seed), ops, keys)
    view = cluster.view(0)
    victim = cl[0].node_id if crash == "client" else view.writer

    def client(c, part):
        for key, addr in part:
            try:
                if addr:
                    yield from c.put(key, b"v%d" % addr)
                else:
                    yield from c.delete(key)
            except NodeDown:
                return
            except HiStoreError:
                pass

    def killer():
        yield from rt.sleep(crash_at)
        cluster.crash(victim)
        if crash == "primary":
            yield from cluster.control.fail_over_primary(0)

    def main():
        for c in cl:
            yield from c.connect()
        k = rt.spawn(killer(), name="killer")
        tasks = [rt.spawn(client(c, work[i::clients]), name=f"c{i}") for i, c in enumerate(cl)]
        yield from rt.wait_all(tasks)
        yield from rt.wait_all([k])
        return (yield from cluster.quiesce_check(0))

    return cluster.run(main())


@dataclass
class HazardReport:
    points: int
    split_violations: int
    group_violations: int
    group_failures: list = field(default_factory=list)


def hazard_demo(points: int = 200, seed: int = 0, mode: str = "hybrid",
                horizon: float = 300e-6) -> HazardReport:
    """Crash at ``points`` random instants in both layouts and count divergences."""
    rng = random.Random(seed)
    split = group = 0
    failures = []
    for i in range(points):
        t = rng.uniform(0, horizon)
        s = seed * 100_003 + i
        if split_index_trial(s, t):
            split += 1
        crash = "client" if i % 2 == 0 else "primary"
        rep = group_trial(s, t, crash, mode)
        if not rep.ok:
            group += 1
            failures.append((i, crash, t, rep.summary()))
    return HazardReport(points, split, group, failures)


__all__ = [
    "FaultSchedule", "DEFAULT_SCHEDULES", "load_schedules", "run_schedule", "ScheduleReport",
    "degraded_ratios", "DegradedRow", "recovery_durations", "SplitIndexStore",
    "split_index_trial", "group_trial", "hazard_demo", "HazardReport",
]
