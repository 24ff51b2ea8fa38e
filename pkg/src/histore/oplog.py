"""Append-only log of index updates, split into hash partitions.

Entry wire format: ``[seq:8][kind:1][key_len:2][item_len:1][addr:6][key]``.
Replication batches wrap entries in a small envelope that also carries the
writer's commit watermark, the truncation point and each entry's client
request tag (used to deduplicate client retries across a failover).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from histore.errors import LogGap

DEFAULT_CAPACITY = 1 << 20

_ENTRY = struct.Struct("<QBHB")
_TAG = struct.Struct("<IQ")
_BATCH = struct.Struct("<QBQQI")


class Kind(IntEnum):
    PUT = 1
    UPDATE = 2
    DELETE = 3


class LogFull(Exception):
    pass


@dataclass(slots=True)
class LogEntry:
    seq: int
    kind: Kind
    key: bytes
    value_addr: int = 0
    item_len: int = 0
    applied: bool = False
    client: int = 0
    req: int = 0
    # local bookkeeping, never shipped
    appended_at: float = 0.0
    replicated_at: float = 0.0
    committed_at: float = 0.0

    def same_update(self, other: "LogEntry") -> bool:
        return (self.seq, self.kind, self.key, self.value_addr, self.item_len) == (
            other.seq, other.kind, other.key, other.value_addr, other.item_len)


def encode_entry(e: LogEntry) -> bytes:
    return _ENTRY.pack(e.seq, int(e.kind), len(e.key), e.item_len) + e.value_addr.to_bytes(6, "little") + e.key


def decode_entry(buf: bytes, pos: int = 0) -> tuple[LogEntry, int]:
    seq, kind, klen, ilen = _ENTRY.unpack_from(buf, pos)
    addr = int.from_bytes(buf[pos + 12:pos + 18], "little")
    end = pos + 18 + klen
    if end > len(buf):
        raise ValueError("truncated log entry")
    return LogEntry(seq, Kind(kind), bytes(buf[pos + 18:end]), addr, ilen), end


def encode_entries(entries) -> bytes:
    body = b"".join(encode_entry(e) for e in entries)
    tags = b"".join(_TAG.pack(e.client, e.req) for e in entries)
    return struct.pack("<I", len(entries)) + body + tags


def decode_entries(buf: bytes, pos: int = 0) -> tuple[list[LogEntry], int]:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = []
    for _ in range(n):
        e, pos = decode_entry(buf, pos)
        out.append(e)
    for e in out:
        e.client, e.req = _TAG.unpack_from(buf, pos)
        pos += _TAG.size
    return out, pos


@dataclass
class ReplicateBatch:
    epoch: int
    partition: int
    commit_watermark: int
    truncate_to: int
    entries: list

    def encode(self) -> bytes:
        return _BATCH.pack(self.epoch, self.partition, self.commit_watermark, self.truncate_to,
                           len(self.entries)) + encode_entries(self.entries)

    @classmethod
    def decode(cls, buf: bytes) -> "ReplicateBatch":
        epoch, part, commit, trunc, _n = _BATCH.unpack_from(buf)
        entries, _ = decode_entries(buf, _BATCH.size)
        return cls(epoch, part, commit, trunc, entries)


class LogPartition:
    """One log partition.  Sequence numbers start at 1 and have no gaps."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self._entries: list[LogEntry] = []
        self._head = 0  # index of the first live entry in _entries
        self.base = 0  # seq of the last discarded entry
        self.append_seq = 0
        self.applied_watermark = 0
        self.replicated_watermark = 0
        self.commit_watermark = 0

    def __len__(self) -> int:
        return self.append_seq - self.base

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity

    def reset(self, base: int) -> None:
        """Empty log whose next append gets ``base + 1`` (used by rebuilds)."""
        self._entries = []
        self._head = 0
        self.base = self.append_seq = self.applied_watermark = base
        self.replicated_watermark = self.commit_watermark = base

    def append(self, entries: list[LogEntry]) -> int:
        if not entries:
            raise ValueError("append needs at least one entry")
        if len(self) + len(entries) > self.capacity:
            raise LogFull()
        first = self.append_seq + 1
        for i, e in enumerate(entries):
            e.seq = first + i
            e.applied = False
        self._entries.extend(entries)
        self.append_seq += len(entries)
        return first

    def append_replicated(self, entries: list[LogEntry]) -> int:
        """Append entries that already carry seqs; duplicates are skipped.

        Raises LogGap if the batch starts beyond ``append_seq + 1``.
        Returns the number of new entries.
        """
        added = 0
        for e in entries:
            if e.seq <= self.append_seq:
                continue
            if e.seq != self.append_seq + 1:
                raise LogGap(f"expected seq {self.append_seq + 1}, got {e.seq}",
                             need_from=self.append_seq)
            if len(self) >= self.capacity:
                raise LogFull()
            e.applied = False
            self._entries.append(e)
            self.append_seq += 1
            added += 1
        return added

    def get(self, seq: int) -> LogEntry:
        if not self.base < seq <= self.append_seq:
            raise IndexError(f"seq {seq} not in log ({self.base}, {self.append_seq}]")
        return self._entries[self._head + seq - self.base - 1]

    def fetch(self, since: int, max_batch: int | None = None) -> list[LogEntry]:
        """Entries in (since, since + max_batch]."""
        if since < self.base:
            raise IndexError(f"seq {since + 1} already truncated (base {self.base})")
        start = self._head + since - self.base
        stop = self._head + self.append_seq - self.base
        if max_batch is not None:
            stop = min(stop, start + max_batch)
        return self._entries[start:stop]

    def mark_applied(self, up_to: int) -> None:
        if up_to < self.applied_watermark:
            raise ValueError(f"applied watermark cannot regress ({self.applied_watermark} -> {up_to})")
        if up_to > self.append_seq:
            raise ValueError("cannot mark entries that were never appended")
        for seq in range(self.applied_watermark + 1, up_to + 1):
            self.get(seq).applied = True
        self.applied_watermark = up_to

    def truncate(self, up_to: int) -> int:
        up_to = min(up_to, self.applied_watermark)
        if up_to <= self.base:
            return 0
        freed = up_to - self.base
        self._head += freed
        self.base = up_to
        if self._head > 4096 and self._head * 2 > len(self._entries):
            del self._entries[:self._head]
            self._head = 0
        return freed


class OpLog:
    def __init__(self, partitions: int, capacity: int = DEFAULT_CAPACITY):
        self.parts = [LogPartition(capacity) for _ in range(partitions)]

    def __getitem__(self, p: int) -> LogPartition:
        return self.parts[p]

    def __len__(self) -> int:
        return len(self.parts)

    def applied(self) -> list[int]:
        return [p.applied_watermark for p in self.parts]

    def heads(self) -> list[int]:
        return [p.append_seq for p in self.parts]
