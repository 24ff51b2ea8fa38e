"""Index group: one hash-table primary plus two skiplist backups.

Threading follows the usual split.  RPC threads check the epoch and role,
append writes to the partitioned log and hand the request off.  One worker
per log partition replicates batches, applies committed entries and answers
scans.  A partition's index state is only touched while holding that
partition's worker, so every partition has a single writer.

Commit visibility
-----------------
Backups ack a batch before the writer applies it to its own index.  Each
writer therefore publishes, per partition, two words in a small registered
region: ``started`` (set before a batch is applied) and ``committed`` (set
after).  Readers on other replicas fetch these words with one one-sided
read.  They drain their log up to ``started``, after waiting until
``committed`` catches up with it.  A scan or degraded GET therefore never
shows an update that a later GET on the hash table could miss, and always
shows every update such a GET could have seen.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum

from histore.data_store import MAX_ITEM
from histore.errors import (
    BadRequest,
    ConfigError,
    LogGap,
    NotPrimary,
    Redirect,
    RpcError,
    StaleEpoch,
    TransportError,
    Unsupported,
    WriteNotAcked,
    WritePaused,
)
from histore.hash_index import HashTable, HashTableLayout, check_key, key_hash
from histore.oplog import (
    Kind,
    LogEntry,
    OpLog,
    ReplicateBatch,
    decode_entries,
    encode_entries,
)
from histore.skiplist import (
    PartitionedSkiplist,
    chunk_records,
    decode_records,
    encode_record,
    loser_tree_merge,
)
from histore.transport.base import US, CostModel

log = logging.getLogger(__name__)

MODES = ("hybrid", "all-hash", "all-skiplist")

_WRITE = struct.Struct("<QIQBBQ")
_SCAN = struct.Struct("<QI")
_GET = struct.Struct("<Q")
_ADDR = struct.Struct("<QB")
_ACK = struct.Struct("<QQ")
_FETCH = struct.Struct("<BQI")
_EXPORT = struct.Struct("<QQ")
_EXPORT_REPLY = struct.Struct("<QQBB")
_WM = struct.Struct("<QQ")


class Role(str, Enum):
    PRIMARY = "primary"
    BACKUP = "backup"
    TEMP_PRIMARY = "temporary_primary"
    REBUILDING = "rebuilding"


WRITER_ROLES = (Role.PRIMARY, Role.TEMP_PRIMARY)


def index_kind(mode: str, role: Role) -> str:
    """'hash' or 'skiplist': the index a node in ``role`` keeps under ``mode``."""
    if mode == "all-hash":
        return "hash"
    if mode == "all-skiplist":
        return "skiplist"
    return "hash" if role == Role.PRIMARY else "skiplist"


# ---------------------------------------------------------------------------
# configuration and membership
# ---------------------------------------------------------------------------


@dataclass
class GroupConfig:
    group_id: int
    hash_slice: tuple
    primary: int
    backups: tuple
    data_servers: tuple = ()
    capacity: int = 1 << 20

    def __post_init__(self):
        self.hash_slice = tuple(self.hash_slice)
        self.backups = tuple(self.backups)
        self.data_servers = tuple(self.data_servers)

    def validate(self, where: str = "group") -> None:
        if len(self.backups) != 2:
            raise ConfigError(f"{where}.backups: need exactly two backups")
        nodes = (self.primary, *self.backups)
        if len(set(nodes)) != 3:
            raise ConfigError(f"{where}: primary and backups must be three distinct nodes")
        if not self.hash_slice:
            raise ConfigError(f"{where}.hash_slice: empty")
        if self.capacity < 1:
            raise ConfigError(f"{where}.capacity must be >= 1")

    @property
    def members(self) -> tuple:
        return (self.primary, *self.backups)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("hash_slice", "backups", "data_servers"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroupConfig":
        return cls(**d)


@dataclass
class GroupView:
    """Membership of one group at one epoch, as clients and nodes see it."""

    group_id: int
    epoch: int
    mode: str
    writer: int | None
    writer_role: str
    backups: list  # replication targets: live non-writer members
    members: list  # every live member
    scan_nodes: list
    get_nodes: list
    wm_regions: dict  # node -> region id of its commit watermark words
    hash_layout: dict | None = None  # set while a hash primary serves one-sided GETs
    degraded: bool = False
    available: bool = True
    pause_truncation: bool = False
    hash_slice: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wm_regions"] = {str(k): v for k, v in self.wm_regions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroupView":
        d = dict(d)
        d["wm_regions"] = {int(k): v for k, v in d["wm_regions"].items()}
        return cls(**d)


@dataclass
class NodeParams:
    partitions: int = 4
    batch_size: int = 64
    batch_delay: float = 50 * US
    log_capacity: int = 1 << 20
    write_wait: float = 800 * US
    retry_delay: float = 20 * US
    idle_tick: float = 5e-3
    dedup_window: int = 1 << 16
    fetch_batch: int = 4096
    costs: CostModel = field(default_factory=CostModel)


# ---------------------------------------------------------------------------
# request codecs (shared with the client)
# ---------------------------------------------------------------------------


@dataclass
class WriteRequest:
    epoch: int
    client: int
    req: int
    kind: Kind
    key: bytes
    value_addr: int = 0
    item_len: int = 0

    def encode(self) -> bytes:
        return _WRITE.pack(self.epoch, self.client, self.req, int(self.kind), self.item_len,
                           self.value_addr) + self.key

    @classmethod
    def decode(cls, buf: bytes) -> "WriteRequest":
        if len(buf) <= _WRITE.size:
            raise BadRequest("short write request")
        epoch, client, req, kind, ilen, addr = _WRITE.unpack_from(buf)
        try:
            kind = Kind(kind)
        except ValueError:
            raise BadRequest(f"bad write kind {kind}") from None
        return cls(epoch, client, req, kind, bytes(buf[_WRITE.size:]), addr, ilen)


def encode_scan(epoch: int, lo: bytes, count: int) -> bytes:
    return _SCAN.pack(epoch, count) + lo


def decode_scan(buf: bytes) -> tuple[int, bytes, int]:
    epoch, count = _SCAN.unpack_from(buf)
    return epoch, bytes(buf[_SCAN.size:]), count


def encode_get(epoch: int, key: bytes) -> bytes:
    return _GET.pack(epoch) + key


def decode_addr_reply(body: bytes) -> tuple[int, int] | None:
    addr, ilen = _ADDR.unpack(body)
    return None if addr == 0 else (addr, ilen)


def encode_records(records) -> bytes:
    return b"".join(encode_record(k, a, n) for k, a, n in records)


# ---------------------------------------------------------------------------
# the node
# ---------------------------------------------------------------------------


class _Snapshot:
    __slots__ = ("seqs", "chunks")

    def __init__(self, seqs, chunks):
        self.seqs = seqs
        self.chunks = chunks


class IndexNode:
    """Server state and endpoints of one index node."""

    def __init__(self, net, node_id: int, group: GroupConfig, mode: str = "hybrid",
                 params: NodeParams | None = None, seed: int = 0):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        self.net = net
        self.rt = net.rt
        self.node_id = node_id
        self.group = group
        self.mode = mode
        self.params = params or NodeParams()
        self.costs = self.params.costs
        self.seed = seed
        P = self.params.partitions
        self.P = P
        self.port = net.port(node_id)
        self.log = OpLog(P, self.params.log_capacity)
        self.wm_region = net.register_region(node_id, _WM.size * P)
        self.hash: HashTable | None = None
        self.sl: PartitionedSkiplist | None = None
        self.role: Role | None = None
        self.epoch = 0
        self.view: GroupView | None = None
        self.paused = False
        self.workers = [self.rt.pool(1) for _ in range(P)]
        self.append_note = [self.rt.notifier() for _ in range(P)]
        self.commit_note = [self.rt.notifier() for _ in range(P)]
        self.repl_note = [self.rt.notifier() for _ in range(P)]
        self.space_note = [self.rt.notifier() for _ in range(P)]
        self._idle = [True] * P
        # per partition: accepted a batch from the writer in the current epoch
        self.synced = [False] * P
        self._mu = self.rt.lock()
        self._loop_gen = 0
        self.dedup: dict[int, OrderedDict] = {}
        self.peer_applied: dict[int, list] = {}
        self.snapshots: dict[int, _Snapshot] = {}
        self._next_sid = 1
        self.rebuild: dict | None = None
        self.stats = {"applied": 0, "batches": 0, "gaps": 0, "wm_reads": 0}
        for name, fn in (
            ("write", self.handle_write),
            ("scan", self.handle_scan),
            ("get", self.handle_get),
            ("get_degraded", self.handle_get),
            ("log_replicate", self.handle_log_replicate),
            ("log_fetch", self.handle_log_fetch),
            ("export_hash", self.handle_export),
            ("export_skiplist", self.handle_export),
            ("quiesce_check", self.handle_quiesce_check),
            ("role_change", self.handle_role_change),
            ("heartbeat", self.handle_heartbeat),
            ("write_pause", self.handle_write_pause),
            ("rebuild_start", self.handle_rebuild_start),
            ("rebuild_chunk", self.handle_rebuild_chunk),
            ("rebuild_done", self.handle_rebuild_done),
        ):
            net.serve(node_id, name, fn)

    # -- setup ---------------------------------------------------------------

    @property
    def kind(self) -> str | None:
        if self.hash is not None:
            return "hash"
        if self.sl is not None:
            return "skiplist"
        return None

    def _new_index(self, kind: str) -> None:
        self.hash = None
        self.sl = None
        if kind == "hash":
            buckets, overflow = HashTableLayout.size_for(self.group.capacity)
            size = (buckets + overflow) * 64
            region = self.net.register_region(self.node_id, size)
            layout = HashTableLayout(self.node_id, region.region_id, buckets, overflow)
            self.hash = HashTable(region, layout)
        else:
            self.sl = PartitionedSkiplist(self.P, seed=(self.seed << 16) ^ self.node_id)

    def start(self, role: Role, view: GroupView) -> None:
        """Bootstrap-time role assignment (no RPC)."""
        self.role = role
        self.epoch = view.epoch
        self.view = view
        self.synced = [True] * self.P
        self._new_index(index_kind(self.mode, role))
        self._start_loops()

    @property
    def layout(self) -> HashTableLayout | None:
        return self.hash.layout if self.hash is not None else None

    def alive(self) -> bool:
        return not self.net.is_crashed(self.node_id)

    @property
    def is_writer(self) -> bool:
        return self.role in WRITER_ROLES

    # -- watermark words -----------------------------------------------------

    def _publish(self, p: int, started: int | None = None, committed: int | None = None) -> None:
        base = p * _WM.size
        if started is not None:
            self.wm_region.write64(base, started)
        if committed is not None:
            self.wm_region.write64(base + 8, committed)

    def _read_targets(self, parts):
        """Commit targets for ``parts`` (generator returning {p: seq})."""
        view = self.view
        writer = view.writer
        if writer == self.node_id:
            return {p: self.log[p].commit_watermark for p in parts}
        logs = self.log.parts
        if all(self.synced[p] and logs[p].commit_watermark >= logs[p].append_seq for p in parts):
            # every update the writer may have started is in our log and known committed
            return {p: logs[p].append_seq for p in parts}
        known = {p: logs[p].commit_watermark for p in parts}
        region = view.wm_regions.get(writer)
        if writer is None or region is None:
            return {p: max(known[p], self.log[p].append_seq) for p in parts}
        first = None
        for _ in range(64):
            try:
                raw = yield from self.port.read(writer, region, 0, _WM.size * self.P, tag="wm")
            except TransportError:
                # writer unreachable: whatever we logged will be committed by failover
                return {p: max(known[p], self.log[p].append_seq) for p in parts}
            self.stats["wm_reads"] += 1
            words = [_WM.unpack_from(raw, p * _WM.size) for p in range(self.P)]
            if first is None:
                first = {p: words[p][0] for p in parts}
            if all(words[p][1] >= first[p] for p in parts):
                for p in parts:
                    if words[p][1] > logs[p].commit_watermark:
                        logs[p].commit_watermark = words[p][1]
                return {p: max(known[p], first[p]) for p in parts}
        raise WriteNotAcked("writer commit watermark not advancing")

    # -- local index helpers ----------------------------------------------------

    def _apply(self, p: int, e: LogEntry) -> float:
        """Apply one entry to the local index; returns simulated CPU cost."""
        c = self.costs
        if self.hash is not None:
            if e.kind == Kind.DELETE:
                self.hash.apply_delete(e.key)
                return c.hash_apply
            kh = key_hash(e.key)
            return c.hash_apply * self.hash.apply_put(e.key, kh, e.item_len, e.value_addr)
        part = self.sl.parts[p]
        if e.kind == Kind.DELETE:
            return part.delete(e.key) * c.skiplist_visit + c.skiplist_link
        return part.insert(e.key, e.value_addr, e.item_len) * c.skiplist_visit + c.skiplist_link

    def _apply_upto(self, p: int, hi: int) -> float:
        lp = self.log[p]
        lo = lp.applied_watermark
        if hi <= lo:
            return 0.0
        cost = 0.0
        for e in lp.fetch(lo, hi - lo):
            cost += self._apply(p, e)
        lp.mark_applied(hi)
        self.stats["applied"] += hi - lo
        return cost

    def _pull(self, p: int, target: int, source: int | None = None):
        """Fetch missing log entries up to ``target`` from ``source`` (the writer)."""
        lp = self.log[p]
        source = self.view.writer if source is None else source
        while lp.append_seq < target:
            entries, _head, commit = yield from self._fetch(source, p, lp.append_seq,
                                                            self.params.fetch_batch)
            if not entries:
                break
            with self._mu:
                lp.append_replicated(entries)
                if commit > lp.commit_watermark:
                    lp.commit_watermark = commit

    def _drain(self, p: int, target: int):
        """Caller holds worker ``p``.  Bring the index up to ``target``."""
        lp = self.log[p]
        if target > lp.append_seq:
            try:
                yield from self._pull(p, target)
            except TransportError:
                pass
        hi = min(target, lp.append_seq)
        if hi > lp.applied_watermark:
            cost = self._apply_upto(p, hi)
            yield from self.rt.compute(cost)

    def _lookup(self, p: int, key: bytes) -> tuple[tuple[int, int] | None, float]:
        if self.hash is not None:
            slot = self.hash.get(key)
            hit = None if slot is None else (slot.value_addr, slot.item_len)
            return hit, self.costs.hash_apply
        hit, visits = self.sl.parts[p].search(key)
        return hit, visits * self.costs.skiplist_visit

    # -- gates -------------------------------------------------------------------

    def _sibling(self):
        if self.view is None:
            return None
        others = [n for n in self.view.scan_nodes if n != self.node_id]
        return others[0] if others else None

    def _gate_read(self, epoch: int) -> None:
        if self.role is None or self.role == Role.REBUILDING:
            raise Redirect(f"node {self.node_id} is rebuilding", sibling=self._sibling())
        if epoch != self.epoch:
            raise StaleEpoch(f"request epoch {epoch}, node epoch {self.epoch}", epoch=self.epoch)

    def _gate_write(self, epoch: int) -> None:
        if epoch != self.epoch:
            raise StaleEpoch(f"request epoch {epoch}, node epoch {self.epoch}", epoch=self.epoch)
        if not self.is_writer:
            raise NotPrimary(f"node {self.node_id} is {self.role and self.role.value}")
        if self.paused:
            raise WritePaused(f"writes paused on node {self.node_id}")

    # -- write path -----------------------------------------------------------

    def _dedup_get(self, client: int, req: int):
        window = self.dedup.get(client)
        if window is None:
            return None
        return window.get(req)

    def _dedup_put(self, client: int, req: int, p: int, seq: int) -> None:
        window = self.dedup.get(client)
        if window is None:
            window = self.dedup[client] = OrderedDict()
        window[req] = (p, seq)
        if len(window) > self.params.dedup_window:
            window.popitem(last=False)

    def handle_write(self, payload: bytes, ctx):
        w = WriteRequest.decode(payload)
        try:
            check_key(w.key)
        except ValueError as exc:
            raise BadRequest(str(exc)) from None
        if w.kind != Kind.DELETE and (w.value_addr == 0 or not 0 < w.item_len <= MAX_ITEM):
            raise BadRequest("put/update needs a value address and item length")
        self._gate_write(w.epoch)
        rt = self.rt
        p = key_hash(w.key).partition(self.P)
        lp = self.log[p]
        found = self._dedup_get(w.client, w.req)
        if found is None:
            deadline = rt.now() + self.params.write_wait
            while lp.full:
                left = deadline - rt.now()
                if left <= 0:
                    raise WriteNotAcked("log full")
                yield from self.space_note[p].wait(left)
                self._gate_write(w.epoch)
            yield from ctx.compute(self.costs.log_append)
            self._gate_write(w.epoch)
            found = self._dedup_get(w.client, w.req)
        if found is None:
            kind = w.kind
            addr = 0 if kind == Kind.DELETE else w.value_addr
            ilen = 0 if kind == Kind.DELETE else w.item_len
            e = LogEntry(0, kind, w.key, addr, ilen, client=w.client, req=w.req)
            with self._mu:
                lp.append([e])
                e.appended_at = rt.now()
                self._dedup_put(w.client, w.req, p, e.seq)
            seq = e.seq
            if self._idle[p] or lp.append_seq - lp.replicated_watermark >= self.params.batch_size:
                self.append_note[p].notify()
        else:
            p, seq = found
            lp = self.log[p]
        ctx.detach()
        t_wait = rt.now()
        deadline = t_wait + self.params.write_wait
        while lp.commit_watermark < seq:
            left = deadline - rt.now()
            if left <= 0 or not self.alive():
                raise WriteNotAcked(f"seq {seq} of partition {p} not replicated in time")
            yield from self.commit_note[p].wait(left)
        if seq > lp.base:
            e = lp.get(seq)
            start = max(e.appended_at, t_wait if found is not None else e.appended_at)
            if e.replicated_at >= start:
                ctx.phases["log_sync"] = e.replicated_at - start
                ctx.phases["index_access"] = max(0.0, e.committed_at - e.replicated_at)
        return b""

    # -- replication (writer side) -------------------------------------------------

    def _start_loops(self) -> None:
        self._loop_gen += 1
        gen = self._loop_gen
        if self.role in WRITER_ROLES:
            for p in range(self.P):
                self._idle[p] = True
                self.rt.spawn(self._replicator(p, gen), name=f"repl{self.node_id}.{p}")
        elif self.role == Role.BACKUP:
            for p in range(self.P):
                self.rt.spawn(self._applier(p, gen), name=f"apply{self.node_id}.{p}")

    def _running(self, gen: int) -> bool:
        return self._loop_gen == gen and self.alive()

    def stop(self) -> None:
        """Let the background loops exit at their next check."""
        self._loop_gen += 1
        for n in (*self.append_note, *self.repl_note):
            n.notify()

    def _truncate_point(self, p: int) -> int:
        if self.view is None or self.view.pause_truncation:
            return 0
        lp = self.log[p]
        point = lp.applied_watermark
        for b in self.view.backups:
            seen = self.peer_applied.get(b)
            point = min(point, seen[p] if seen else 0)
        return point

    def _replicator(self, p: int, gen: int):
        rt = self.rt
        lp = self.log[p]
        prm = self.params
        while self._running(gen):
            if lp.replicated_watermark >= lp.append_seq:
                self._idle[p] = True
                yield from self.append_note[p].wait(prm.idle_tick)
                continue
            self._idle[p] = False
            first = lp.get(lp.replicated_watermark + 1)
            deadline = first.appended_at + prm.batch_delay
            while (lp.append_seq - lp.replicated_watermark < prm.batch_size
                   and rt.now() < deadline and self._running(gen)):
                yield from self.append_note[p].wait(deadline - rt.now())
            if not self._running(gen):
                return
            lo, hi = lp.replicated_watermark, lp.append_seq
            ok = yield from self._replicate(p, lo, hi, gen)
            if not self._running(gen):
                return
            if not ok:
                yield from rt.sleep(prm.retry_delay)
                continue
            now = rt.now()
            lp.replicated_watermark = max(lp.replicated_watermark, hi)
            for e in lp.fetch(lo, hi - lo):
                e.replicated_at = now
            yield from self._commit(p, hi, gen)
            self.stats["batches"] += 1

    def _commit(self, p: int, hi: int, gen: int):
        rt = self.rt
        lp = self.log[p]
        tok = yield from self.workers[p].acquire()
        try:
            if not self._running(gen) or hi <= lp.commit_watermark:
                return
            lo = lp.applied_watermark
            self._publish(p, started=hi)
            cost = self._apply_upto(p, hi)
            yield from rt.compute(cost)
            if not self._running(gen):
                return
            now = rt.now()
            for e in lp.fetch(lo, hi - lo):
                e.committed_at = now
            lp.commit_watermark = hi
            self._publish(p, committed=hi)
        finally:
            self.workers[p].release(tok)
        self.commit_note[p].notify()
        trunc = self._truncate_point(p)
        if trunc > lp.base and lp.truncate(trunc):
            self.space_note[p].notify()

    def _replicate(self, p: int, lo: int, hi: int, gen: int):
        targets = [b for b in self.view.backups if b != self.node_id]
        if not targets:
            return False
        lp = self.log[p]
        batch = ReplicateBatch(self.epoch, p, lp.commit_watermark, self._truncate_point(p),
                               lp.fetch(lo, hi - lo))
        payload = batch.encode()
        if len(targets) == 1:
            return (yield from self._send_batch(targets[0], p, payload, hi))
        tasks = [self.rt.spawn(self._send_batch(t, p, payload, hi), name=f"send{t}.{p}")
                 for t in targets]
        results = yield from self.rt.wait_all(tasks)
        return all(ok and res for ok, res in results)

    def _send_batch(self, target: int, p: int, payload: bytes, hi: int):
        lp = self.log[p]
        try:
            try:
                body = yield from self.port.call(target, "log_replicate", payload, tag="replicate")
            except LogGap as gap:
                need = gap.data.get("need_from", 0)
                if need < lp.base:
                    log.warning("backup %d needs truncated entries of partition %d", target, p)
                    return False
                self.stats["gaps"] += 1
                fill = ReplicateBatch(self.epoch, p, lp.commit_watermark, 0,
                                      lp.fetch(need, hi - need))
                body = yield from self.port.call(target, "log_replicate", fill.encode(),
                                                 tag="replicate")
        except (RpcError, TransportError) as exc:
            log.debug("replicate to %d failed: %r", target, exc)
            return False
        head, applied = _ACK.unpack(body)
        seen = self.peer_applied.setdefault(target, [0] * self.P)
        seen[p] = max(seen[p], applied)
        return head >= hi

    # -- replication (backup side) -------------------------------------------------

    def handle_log_replicate(self, payload: bytes, ctx):
        b = ReplicateBatch.decode(payload)
        if b.epoch != self.epoch:
            raise StaleEpoch(f"batch epoch {b.epoch}, node epoch {self.epoch}", epoch=self.epoch)
        if self.view is None or ctx.src != self.view.writer or self.is_writer:
            raise NotPrimary(f"node {ctx.src} is not the writer here")
        if b.entries:
            yield from ctx.compute(self.costs.log_append * len(b.entries))
        p = b.partition
        lp = self.log[p]
        with self._mu:
            lp.append_replicated(b.entries)
            self.synced[p] = True
            if b.commit_watermark > lp.commit_watermark:
                lp.commit_watermark = b.commit_watermark
            if b.truncate_to and not self.view.pause_truncation:
                lp.truncate(b.truncate_to)
        self.repl_note[p].notify()
        return _ACK.pack(lp.append_seq, lp.applied_watermark)

    def _applier(self, p: int, gen: int):
        lp = self.log[p]
        while self._running(gen):
            if lp.applied_watermark >= min(lp.commit_watermark, lp.append_seq):
                yield from self.repl_note[p].wait(self.params.idle_tick)
                continue
            tok = yield from self.workers[p].acquire()
            try:
                if self._running(gen):
                    yield from self._drain(p, lp.commit_watermark)
            finally:
                self.workers[p].release(tok)

    def _fetch(self, source: int, p: int, since: int, max_batch: int):
        body = yield from self.port.call(source, "log_fetch", _FETCH.pack(p, since, max_batch),
                                         tag="fetch")
        head, commit = _ACK.unpack_from(body)
        entries, _ = decode_entries(body, _ACK.size)
        return entries, head, commit

    def handle_log_fetch(self, payload: bytes, ctx):
        p, since, max_batch = _FETCH.unpack(payload)
        if p >= self.P:
            raise BadRequest(f"no partition {p}")
        lp = self.log[p]
        if since < lp.base:
            raise LogGap(f"entries after {since} truncated", need_from=since, base=lp.base)
        entries = lp.fetch(since, max_batch) if since < lp.append_seq else []
        if entries:
            yield from ctx.compute(self.costs.export_entry * len(entries))
        return _ACK.pack(lp.append_seq, lp.commit_watermark) + encode_entries(entries)

    # -- reads ------------------------------------------------------------------------

    def _locked_parts(self, parts, targets, fn, ctx=None):
        """Acquire workers of ``parts`` in order, drain, then run ``fn`` under them."""
        rt = self.rt
        t0 = rt.now()
        toks = []
        try:
            for p in parts:
                toks.append((p, (yield from self.workers[p].acquire())))
            waited = rt.now() - t0
            if ctx is not None:
                ctx.phases["queue_wait"] = ctx.phases.get("queue_wait", 0.0) + waited
            for p in parts:
                yield from self._drain(p, targets[p])
            return (yield from fn())
        finally:
            for p, tok in toks:
                self.workers[p].release(tok)

    def handle_get(self, payload: bytes, ctx):
        (epoch,) = _GET.unpack_from(payload)
        key = bytes(payload[_GET.size:])
        self._gate_read(epoch)
        try:
            p = key_hash(key).partition(self.P)
        except ValueError as exc:
            raise BadRequest(str(exc)) from None
        ctx.detach()
        q0 = ctx.phases.get("queue_wait", 0.0)
        t0 = self.rt.now()
        targets = yield from self._read_targets([p])

        def lookup():
            hit, cost = self._lookup(p, key)
            yield from self.rt.compute(cost)
            return hit

        hit = yield from self._locked_parts([p], targets, lookup, ctx)
        waited = ctx.phases.get("queue_wait", 0.0) - q0
        ctx.phases["index_access"] = self.rt.now() - t0 - waited
        return _ADDR.pack(*(hit or (0, 0)))

    def handle_scan(self, payload: bytes, ctx):
        epoch, lo, count = decode_scan(payload)
        self._gate_read(epoch)
        if self.sl is None:
            raise Unsupported("this index node keeps no sorted index")
        if count < 1:
            raise BadRequest("scan count must be >= 1")
        ctx.detach()
        rt = self.rt
        q0 = ctx.phases.get("queue_wait", 0.0)
        t0 = rt.now()
        parts = list(range(self.P))
        targets = yield from self._read_targets(parts)

        def search():
            per = [self.sl.parts[p].range(lo, count) for p in parts]
            out = []
            for rec in loser_tree_merge([r for r, _ in per]):
                out.append(rec)
                if len(out) == count:
                    break
            c = self.costs
            # partitions are searched by their own workers in parallel
            cost = max(v for _, v in per) * c.skiplist_visit + len(out) * c.merge_entry
            yield from rt.compute(cost)
            return out

        out = yield from self._locked_parts(parts, targets, search, ctx)
        waited = ctx.phases.get("queue_wait", 0.0) - q0
        ctx.phases["index_access"] = rt.now() - t0 - waited
        return encode_records(out)

    # -- export / quiesce -----------------------------------------------------------

    def _records(self):
        if self.hash is not None:
            return sorted(self.hash.entries())
        return list(self.sl.items())

    def handle_export(self, payload: bytes, ctx):
        sid, cursor = _EXPORT.unpack(payload)
        rt = self.rt
        ctx.detach()
        if sid == 0:
            toks = []
            try:
                for p in range(self.P):
                    toks.append((p, (yield from self.workers[p].acquire())))
                seqs = [lp.applied_watermark for lp in self.log.parts]
                if self.hash is not None:
                    records = list(self.hash.entries())
                else:
                    records = list(self.sl.items())
                yield from rt.compute(len(records) * self.costs.export_entry)
            finally:
                for p, tok in toks:
                    self.workers[p].release(tok)
            sid = self._next_sid
            self._next_sid += 1
            self.snapshots[sid] = _Snapshot(seqs, list(chunk_records(records)))
        snap = self.snapshots.get(sid)
        if snap is None:
            raise BadRequest(f"unknown snapshot {sid}")
        if cursor < len(snap.chunks):
            chunk = snap.chunks[cursor]
            nxt = cursor + 1
        else:
            chunk, nxt = b"", cursor
        done = nxt >= len(snap.chunks)
        if done:
            self.snapshots.pop(sid, None)
        head = _EXPORT_REPLY.pack(sid, nxt, int(done), self.P)
        seqs = struct.pack(f"<{self.P}Q", *snap.seqs)
        return head + seqs + chunk

    def handle_quiesce_check(self, payload: bytes, ctx):
        """Drain to the commit point and return every index entry, sorted."""
        ctx.detach()
        if self.role is None or self.role == Role.REBUILDING:
            raise Redirect("rebuilding", sibling=self._sibling())
        parts = list(range(self.P))
        targets = yield from self._read_targets(parts)

        def dump():
            return self._records()
            yield  # pragma: no cover

        records = yield from self._locked_parts(parts, targets, dump)
        info = {"node": self.node_id, "role": self.role.value, "epoch": self.epoch,
                "kind": self.kind, "applied": self.log.applied(), "heads": self.log.heads()}
        head = json.dumps(info).encode()
        return struct.pack("<I", len(head)) + head + encode_records(records)

    # -- control ---------------------------------------------------------------------

    def handle_heartbeat(self, payload: bytes, ctx):
        role = self.role.value if self.role else ""
        return json.dumps({"epoch": self.epoch, "role": role}).encode()
        yield  # pragma: no cover

    def handle_write_pause(self, payload: bytes, ctx):
        """Stop taking writes and wait until everything appended is committed."""
        msg = json.loads(payload)
        if msg.get("epoch") != self.epoch:
            raise StaleEpoch("pause for another epoch", epoch=self.epoch)
        self.paused = bool(msg.get("on", True))
        ctx.detach()
        if self.paused:
            deadline = self.rt.now() + msg.get("timeout", 0.05)
            for p in range(self.P):
                lp = self.log[p]
                while lp.commit_watermark < lp.append_seq:
                    left = deadline - self.rt.now()
                    if left <= 0:
                        self.paused = False
                        raise WriteNotAcked("in-flight writes did not drain")
                    yield from self.commit_note[p].wait(left)
        return json.dumps({"heads": self.log.heads()}).encode()

    def handle_role_change(self, payload: bytes, ctx):
        msg = json.loads(payload)
        epoch = msg["epoch"]
        if epoch <= self.epoch:
            raise StaleEpoch(f"role change for epoch {epoch}, node at {self.epoch}",
                             epoch=self.epoch)
        new_role = Role(msg["role"])
        view = GroupView.from_dict(msg["view"])
        old_role = self.role
        ctx.detach()
        self.epoch = epoch
        self.view = view
        self.paused = False
        if "group" in msg:
            self.group = GroupConfig.from_dict(msg["group"])
        self._loop_gen += 1  # old loops stop at their next check
        self.synced = [False] * self.P
        if new_role in WRITER_ROLES and old_role != new_role:
            yield from self._promote(new_role)
        elif new_role == Role.BACKUP and old_role in WRITER_ROLES:
            for lp in self.log.parts:
                lp.commit_watermark = lp.append_seq
        self.role = new_role
        if new_role == Role.BACKUP and old_role == Role.REBUILDING:
            self.rebuild = None
        self._start_loops()
        for p in range(self.P):
            self.repl_note[p].notify()
            self.commit_note[p].notify()
        return json.dumps({"epoch": self.epoch, "role": self.role.value,
                           "heads": self.log.heads()}).encode()

    def _promote(self, new_role: Role):
        """Become the writer: adopt the longest replica log and commit all of it."""
        rt = self.rt
        if self.role == Role.BACKUP:
            for peer in self.view.backups:
                if peer == self.node_id:
                    continue
                for p in range(self.P):
                    lp = self.log[p]
                    while True:
                        try:
                            entries, head, _ = yield from self._fetch(peer, p, lp.append_seq,
                                                                      self.params.fetch_batch)
                        except (RpcError, TransportError):
                            break
                        if not entries:
                            break
                        with self._mu:
                            lp.append_replicated(entries)
        for p in range(self.P):
            tok = yield from self.workers[p].acquire()
            try:
                lp = self.log[p]
                head = lp.append_seq
                self._publish(p, started=head)
                yield from rt.compute(self._apply_upto(p, head))
                lp.replicated_watermark = lp.commit_watermark = head
                self._publish(p, committed=head)
            finally:
                self.workers[p].release(tok)
        self.dedup.clear()
        for p, lp in enumerate(self.log.parts):
            for e in lp.fetch(lp.base):
                if e.client or e.req:
                    self._dedup_put(e.client, e.req, p, e.seq)

    # -- rebuild (runs on the new node) ----------------------------------------------

    def handle_rebuild_start(self, payload: bytes, ctx):
        msg = json.loads(payload)
        ctx.detach()
        role = Role(msg["target_role"])
        self.role = Role.REBUILDING
        self.epoch = msg["epoch"]
        self.view = GroupView.from_dict(msg["view"])
        if "group" in msg:
            self.group = GroupConfig.from_dict(msg["group"])
        self._loop_gen += 1
        self._new_index(index_kind(self.mode, role))
        self.log = OpLog(self.P, self.params.log_capacity)
        source = msg["source"]
        source_kind = msg["source_kind"]
        self.rebuild = {"source": source, "target_role": role.value,
                        "endpoint": "export_hash" if source_kind == "hash" else "export_skiplist",
                        "sid": 0, "cursor": 0, "done": False, "buffer": [], "records": 0,
                        "sorted": source_kind == "skiplist"}
        yield from self._rebuild_step()
        return json.dumps(self._rebuild_status()).encode()

    def _rebuild_status(self) -> dict:
        rb = self.rebuild
        return {"done": rb["done"], "records": rb["records"], "heads": self.log.heads()}

    def _rebuild_step(self):
        rb = self.rebuild
        rt = self.rt
        body = yield from self.port.call(rb["source"], rb["endpoint"],
                                         _EXPORT.pack(rb["sid"], rb["cursor"]),
                                         timeout=1.0, tag="rebuild")
        sid, nxt, done, nparts = _EXPORT_REPLY.unpack_from(body)
        off = _EXPORT_REPLY.size
        seqs = struct.unpack_from(f"<{nparts}Q", body, off)
        records = decode_records(body[off + 8 * nparts:])
        if rb["sid"] == 0:
            rb["sid"] = sid
            for p, s in enumerate(seqs):
                self.log[p].reset(s)
        rb["cursor"] = nxt
        rb["records"] += len(records)
        c = self.costs
        if self.hash is not None:
            for key, addr, ilen in records:
                self.hash.apply_put(key, key_hash(key), ilen, addr)
            yield from rt.compute(len(records) * c.hash_build_entry)
        else:
            rb["buffer"].extend(records)
        if done:
            if self.sl is not None:
                buf = rb["buffer"]
                n = len(buf)
                cost = n * c.skiplist_link
                if not rb["sorted"]:
                    buf.sort()
                    cost += n * max(1, n.bit_length()) * c.sort_compare
                self.sl.bulk_load(buf)
                rb["buffer"] = []
                yield from rt.compute(cost)
            rb["done"] = True

    def handle_rebuild_chunk(self, payload: bytes, ctx):
        ctx.detach()
        if self.rebuild is None:
            raise BadRequest("no rebuild in progress")
        if not self.rebuild["done"]:
            yield from self._rebuild_step()
        return json.dumps(self._rebuild_status()).encode()

    def handle_rebuild_done(self, payload: bytes, ctx):
        """Replay the source's log tail; ``final`` replays up to its head."""
        msg = json.loads(payload)
        ctx.detach()
        rb = self.rebuild
        if rb is None or not rb["done"]:
            raise BadRequest("snapshot not complete")
        final = msg.get("final", False)
        source = rb["source"]
        lag = 0
        for p in range(self.P):
            lp = self.log[p]
            while True:
                entries, head, commit = yield from self._fetch(source, p, lp.append_seq,
                                                               self.params.fetch_batch)
                with self._mu:
                    lp.append_replicated(entries)
                    lp.commit_watermark = max(lp.commit_watermark, commit)
                if lp.append_seq >= head:
                    break
            target = lp.append_seq if final else lp.commit_watermark
            tok = yield from self.workers[p].acquire()
            try:
                yield from self._drain(p, target)
            finally:
                self.workers[p].release(tok)
            if final:
                lp.replicated_watermark = lp.commit_watermark = lp.append_seq
            lag += lp.append_seq - lp.applied_watermark
        return json.dumps({"lag": lag, "heads": self.log.heads(),
                           "records": len(self._records())}).encode()
