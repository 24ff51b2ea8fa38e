"""Sorted index for backup servers: a skiplist split into hash partitions."""

from __future__ import annotations

import random
import struct
from typing import Iterable, Iterator

from histore.hash_index import KeyHash, key_hash

MAX_LEVEL = 20
PROMOTE_P = 0.25
DEFAULT_PARTITIONS = 4
CHUNK_BYTES = 64 * 1024

_REC = struct.Struct("<HB")


class _Node:
    __slots__ = ("key", "addr", "ilen", "next")

    def __init__(self, key, addr, ilen, height):
        self.key = key
        self.addr = addr
        self.ilen = ilen
        self.next = [None] * height


class Skiplist:
    """Plain single-writer skiplist keyed by bytes.

    Search methods also return a visit count: the number of distinct nodes
    whose key had to be read, i.e. what a one-sided traversal would fetch.
    """

    def __init__(self, rng: random.Random | None = None, max_level: int = MAX_LEVEL,
                 p: float = PROMOTE_P):
        self.rng = rng or random.Random(0)
        self.max_level = max_level
        self.p = p
        self.head = _Node(None, 0, 0, max_level)
        self.level = 1
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def _random_level(self) -> int:
        lvl = 1
        rnd = self.rng.random
        while lvl < self.max_level and rnd() < self.p:
            lvl += 1
        return lvl

    def _descend(self, key: bytes, update: list | None):
        x = self.head
        stop = None
        visits = 0
        for i in range(self.level - 1, -1, -1):
            nxt = x.next[i]
            while nxt is not None and nxt is not stop:
                visits += 1
                if nxt.key < key:
                    x = nxt
                    nxt = x.next[i]
                else:
                    stop = nxt
                    break
            if update is not None:
                update[i] = x
        return x, visits

    def search(self, key: bytes) -> tuple[tuple[int, int] | None, int]:
        x, visits = self._descend(key, None)
        nxt = x.next[0]
        if nxt is not None and nxt.key == key:
            return (nxt.addr, nxt.ilen), visits
        return None, visits

    def insert(self, key: bytes, addr: int, ilen: int) -> int:
        update = [None] * self.max_level
        x, visits = self._descend(key, update)
        nxt = x.next[0]
        if nxt is not None and nxt.key == key:
            nxt.addr = addr
            nxt.ilen = ilen
            return visits
        lvl = self._random_level()
        if lvl > self.level:
            for i in range(self.level, lvl):
                update[i] = self.head
            self.level = lvl
        node = _Node(key, addr, ilen, lvl)
        for i in range(lvl):
            node.next[i] = update[i].next[i]
            update[i].next[i] = node
        self.size += 1
        return visits

    def delete(self, key: bytes) -> int:
        update = [None] * self.max_level
        x, visits = self._descend(key, update)
        node = x.next[0]
        if node is None or node.key != key:
            return visits
        for i in range(len(node.next)):
            if update[i].next[i] is node:
                update[i].next[i] = node.next[i]
        while self.level > 1 and self.head.next[self.level - 1] is None:
            self.level -= 1
        self.size -= 1
        return visits

    def range(self, lo: bytes, n: int) -> tuple[list[tuple[bytes, int, int]], int]:
        x, visits = self._descend(lo, None)
        out = []
        node = x.next[0]
        while node is not None and len(out) < n:
            out.append((node.key, node.addr, node.ilen))
            node = node.next[0]
        # the first node was already read during the descent
        return out, visits + max(0, len(out) - 1)

    def items(self) -> Iterator[tuple[bytes, int, int]]:
        node = self.head.next[0]
        while node is not None:
            yield node.key, node.addr, node.ilen
            node = node.next[0]

    def bulk_load(self, records: Iterable[tuple[bytes, int, int]]) -> int:
        """Build from strictly ascending records in O(n); index must be empty."""
        if self.size:
            raise ValueError("bulk load into a non-empty skiplist")
        last = [self.head] * self.max_level
        prev = None
        top = self.level
        n = 0
        rnd = self.rng.random
        p = self.p
        maxl = self.max_level
        for key, addr, ilen in records:
            if prev is not None and key <= prev:
                raise ValueError("bulk load input must be strictly ascending")
            prev = key
            lvl = 1
            while lvl < maxl and rnd() < p:
                lvl += 1
            node = _Node(key, addr, ilen, lvl)
            for i in range(lvl):
                last[i].next[i] = node
                last[i] = node
            if lvl > top:
                top = lvl
            n += 1
        self.level = top
        self.size = n
        return n

    def check(self) -> None:
        """Assert sortedness and tower validity; raises AssertionError."""
        level0 = []
        node = self.head.next[0]
        while node is not None:
            level0.append(node)
            node = node.next[0]
        for a, b in zip(level0, level0[1:]):
            assert a.key < b.key, "level 0 not strictly sorted"
        pos = {id(nd): i for i, nd in enumerate(level0)}
        for i in range(1, self.max_level):
            node = self.head.next[i]
            prev_pos = -1
            while node is not None:
                assert len(node.next) > i
                p = pos[id(node)]
                assert p > prev_pos
                # every node skipped over must be absent at this level
                for skipped in level0[prev_pos + 1:p]:
                    assert len(skipped.next) <= i, "link skips a node present at its level"
                prev_pos = p
                node = node.next[i]
            for skipped in level0[prev_pos + 1:]:
                assert len(skipped.next) <= i
        assert len(level0) == self.size


# ---------------------------------------------------------------------------
# k-way merge
# ---------------------------------------------------------------------------

_END = object()


def loser_tree_merge(sources: list[Iterable]) -> Iterator:
    """Merge ascending sources of tuples ordered by their first element."""
    its = [iter(s) for s in sources]
    k = len(its)
    if k == 0:
        return
    heads = [next(it, _END) for it in its]
    floor = k  # virtual leaf that loses to nothing, used only while building

    def beats(a, b):
        if a == floor:
            return True
        if b == floor:
            return False
        ha, hb = heads[a], heads[b]
        if ha is _END:
            return False
        if hb is _END:
            return True
        return ha[0] < hb[0] or (ha[0] == hb[0] and a < b)

    tree = [floor] * max(k, 1)

    def adjust(s):
        t = (s + k) // 2
        while t > 0:
            if beats(tree[t], s):
                tree[t], s = s, tree[t]
            t //= 2
        tree[0] = s

    for i in range(k - 1, -1, -1):
        adjust(i)
    while True:
        w = tree[0]
        head = heads[w]
        if head is _END:
            return
        yield head
        heads[w] = next(its[w], _END)
        adjust(w)


# ---------------------------------------------------------------------------
# partitioned index
# ---------------------------------------------------------------------------


class PartitionedSkiplist:
    def __init__(self, partitions: int = DEFAULT_PARTITIONS, seed: int = 0,
                 max_level: int = MAX_LEVEL, p: float = PROMOTE_P):
        if partitions < 1:
            raise ValueError("need at least one partition")
        self.parts = [Skiplist(random.Random((seed << 8) + i), max_level, p)
                      for i in range(partitions)]

    @property
    def partitions(self) -> int:
        return len(self.parts)

    def __len__(self) -> int:
        return sum(len(p) for p in self.parts)

    def partition_of(self, key: bytes, kh: KeyHash | None = None) -> int:
        kh = kh if kh is not None else key_hash(key)
        return kh.partition(len(self.parts))

    def put(self, key: bytes, addr: int, ilen: int, kh: KeyHash | None = None) -> int:
        return self.parts[self.partition_of(key, kh)].insert(key, addr, ilen)

    def delete(self, key: bytes, kh: KeyHash | None = None) -> int:
        return self.parts[self.partition_of(key, kh)].delete(key)

    def get(self, key: bytes, kh: KeyHash | None = None):
        return self.parts[self.partition_of(key, kh)].search(key)

    def range(self, lo: bytes, n: int) -> tuple[list[tuple[bytes, int, int]], list[int]]:
        """Globally sorted n smallest keys >= lo; also per-partition visits."""
        if n < 1:
            raise ValueError("range count must be >= 1")
        per = [p.range(lo, n) for p in self.parts]
        merged = []
        for rec in loser_tree_merge([r for r, _ in per]):
            merged.append(rec)
            if len(merged) == n:
                break
        return merged, [v for _, v in per]

    def items(self) -> Iterator[tuple[bytes, int, int]]:
        return loser_tree_merge([p.items() for p in self.parts])

    def to_dict(self) -> dict[bytes, tuple[int, int]]:
        return {k: (a, n) for k, a, n in self.items()}

    def bulk_load(self, records: Iterable[tuple[bytes, int, int]]) -> int:
        """Import ascending records into an empty index."""
        if len(self):
            raise ValueError("import into a non-empty index")
        buckets = [[] for _ in self.parts]
        P = len(self.parts)
        prev = None
        for rec in records:
            if prev is not None and rec[0] <= prev:
                raise ValueError("import stream must be strictly ascending")
            prev = rec[0]
            buckets[key_hash(rec[0]).partition(P)].append(rec)
        return sum(p.bulk_load(b) for p, b in zip(self.parts, buckets))

    def check(self) -> None:
        for i, p in enumerate(self.parts):
            p.check()
            for key, _, _ in p.items():
                assert key_hash(key).partition(len(self.parts)) == i


# ---------------------------------------------------------------------------
# snapshot stream
# ---------------------------------------------------------------------------


def encode_record(key: bytes, addr: int, ilen: int) -> bytes:
    return _REC.pack(len(key), ilen) + addr.to_bytes(6, "little") + key


def decode_records(chunk: bytes) -> list[tuple[bytes, int, int]]:
    out = []
    i = 0
    n = len(chunk)
    while i < n:
        if i + 9 > n:
            raise ValueError("truncated snapshot record header")
        klen, ilen = _REC.unpack_from(chunk, i)
        addr = int.from_bytes(chunk[i + 3:i + 9], "little")
        end = i + 9 + klen
        if end > n:
            raise ValueError("truncated snapshot record key")
        out.append((bytes(chunk[i + 9:end]), addr, ilen))
        i = end
    return out


def chunk_records(records: Iterable[tuple[bytes, int, int]], limit: int = CHUNK_BYTES) -> Iterator[bytes]:
    """Frame records into chunks of at most ``limit`` bytes, never splitting one."""
    buf = bytearray()
    for key, addr, ilen in records:
        rec = encode_record(key, addr, ilen)
        if len(rec) > limit:
            raise ValueError("record larger than a chunk")
        if len(buf) + len(rec) > limit:
            yield bytes(buf)
            buf = bytearray()
        buf += rec
    if buf:
        yield bytes(buf)
