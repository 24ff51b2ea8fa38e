"""Client-readable chained hash table.

Byte layout (little-endian):

* slot, 8 B:  ``[signature:1][item_len:1][value_addr:6]``; all-zero = empty
* bucket, 64 B: seven slots followed by ``next_ptr:8`` (region offset of the
  next bucket in the chain, 0 = end of chain)

The region holds ``B`` primary buckets (``B`` a power of two) followed by an
overflow area that chains grow into.  Only the owning server mutates the
region, one 8-byte CAS at a time; clients read buckets with one-sided reads.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

from histore.errors import ConfigError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

SLOT_BYTES = 8
SLOTS_PER_BUCKET = 7
BUCKET_BYTES = 64
NEXT_PTR_OFFSET = SLOTS_PER_BUCKET * SLOT_BYTES
MAX_KEY = 64
ADDR_LIMIT = 1 << 48
LOAD_FACTOR = 0.7

_BUCKET = struct.Struct("<8Q")
_U64 = struct.Struct("<Q")


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


class KeyHash(int):
    """64-bit FNV-1a hash of a key, with the derived fields the store uses.

    signature = bits 56-63, bucket index from bits 8-39, group index from
    bits 40-55, log/skiplist partition from bits 0-7.
    """

    __slots__ = ()

    @property
    def signature(self) -> int:
        return self >> 56

    def bucket_index(self, buckets: int) -> int:
        return ((self >> 8) & 0xFFFFFFFF) % buckets

    def group_index(self, slices: int) -> int:
        return ((self >> 40) & 0xFFFF) % slices

    def partition(self, partitions: int) -> int:
        return (self & 0xFF) % partitions


def check_key(key: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)):
        raise TypeError("keys are bytes")
    if not 1 <= len(key) <= MAX_KEY:
        raise ValueError(f"key length {len(key)} outside 1..{MAX_KEY}")


def key_hash(key: bytes) -> KeyHash:
    check_key(key)
    return KeyHash(fnv1a64(key))


class Slot(NamedTuple):
    signature: int
    item_len: int
    value_addr: int


EMPTY = Slot(0, 0, 0)


def pack_slot(slot: Slot) -> int:
    sig, item_len, addr = slot
    if not 0 <= sig <= 0xFF:
        raise ValueError(f"signature {sig} does not fit in one byte")
    if not 0 <= item_len <= 0xFF:
        raise ValueError(f"item_len {item_len} does not fit in one byte")
    if not 0 <= addr < ADDR_LIMIT:
        raise ValueError(f"value_addr {addr:#x} does not fit in 6 bytes")
    return sig | (item_len << 8) | (addr << 16)


def unpack_slot(word: int) -> Slot:
    if not 0 <= word <= MASK64:
        raise ValueError("slot word must be an unsigned 64-bit value")
    return Slot(word & 0xFF, (word >> 8) & 0xFF, word >> 16)


def encode_bucket(slots, next_ptr: int = 0) -> bytes:
    slots = list(slots)
    if len(slots) > SLOTS_PER_BUCKET:
        raise ValueError("a bucket holds seven slots")
    words = [pack_slot(s) for s in slots] + [0] * (SLOTS_PER_BUCKET - len(slots))
    return _BUCKET.pack(*words, next_ptr)


def decode_bucket(data: bytes) -> tuple[list[Slot], int]:
    if len(data) != BUCKET_BYTES:
        raise ValueError(f"bucket must be {BUCKET_BYTES} bytes")
    *words, nxt = _BUCKET.unpack(data)
    return [unpack_slot(w) for w in words], nxt


@dataclass(frozen=True)
class HashTableLayout:
    """What a client needs to find buckets; distributed in the cluster view."""

    node: int
    region_id: int
    primary_bucket_count: int
    overflow_buckets: int

    @property
    def overflow_area_offset(self) -> int:
        return self.primary_bucket_count * BUCKET_BYTES

    @property
    def region_bytes(self) -> int:
        return (self.primary_bucket_count + self.overflow_buckets) * BUCKET_BYTES

    def bucket_offset(self, kh: KeyHash) -> int:
        return kh.bucket_index(self.primary_bucket_count) * BUCKET_BYTES

    @staticmethod
    def size_for(keys: int, load: float = LOAD_FACTOR) -> tuple[int, int]:
        """(primary buckets, overflow buckets) for ``keys`` at ``load``."""
        need = max(1, math.ceil(keys / (SLOTS_PER_BUCKET * load)))
        buckets = 1
        while buckets < need:
            buckets <<= 1
        return buckets, max(16, buckets // 2)

    def to_dict(self) -> dict:
        return {"node": self.node, "region_id": self.region_id,
                "primary_bucket_count": self.primary_bucket_count,
                "overflow_buckets": self.overflow_buckets}

    @classmethod
    def from_dict(cls, d: dict) -> "HashTableLayout":
        return cls(d["node"], d["region_id"], d["primary_bucket_count"], d["overflow_buckets"])


class OverflowExhausted(ConfigError):
    pass


class HashTable:
    """Server-side view of the table: mutation, local lookup and export.

    ``sidecar`` maps key bytes to the region offset of the key's slot word.
    It never leaves the server; clients only see the region.
    """

    def __init__(self, region, layout: HashTableLayout):
        if region.size < layout.region_bytes:
            raise ConfigError("region smaller than the hash table layout")
        if layout.primary_bucket_count & (layout.primary_bucket_count - 1):
            raise ConfigError("primary bucket count must be a power of two")
        self.region = region
        self.layout = layout
        self.sidecar: dict[bytes, int] = {}
        self._overflow_next = layout.primary_bucket_count
        self._overflow_end = layout.primary_bucket_count + layout.overflow_buckets

    def __len__(self) -> int:
        return len(self.sidecar)

    @property
    def overflow_used(self) -> int:
        return self._overflow_next - self.layout.primary_bucket_count

    def _alloc_bucket(self) -> int:
        if self._overflow_next >= self._overflow_end:
            raise OverflowExhausted("hash table overflow area exhausted")
        off = self._overflow_next * BUCKET_BYTES
        self._overflow_next += 1
        return off

    def apply_put(self, key: bytes, kh: KeyHash, item_len: int, value_addr: int) -> int:
        """Install or re-point ``key``; returns the number of buckets touched."""
        if value_addr == 0:
            raise ValueError("value address 0 is reserved")
        word = pack_slot(Slot(kh.signature, item_len, value_addr))
        region = self.region
        off = self.sidecar.get(key)
        if off is not None:
            prior = region.read64(off)
            if region.cas64(off, prior, word) != prior:
                raise RuntimeError("concurrent writer on a single-writer slot")
            return 1
        buf = region.buf
        bucket = self.layout.bucket_offset(kh)
        touched = 1
        while True:
            for i in range(SLOTS_PER_BUCKET):
                off = bucket + i * SLOT_BYTES
                if _U64.unpack_from(buf, off)[0] == 0:
                    if region.cas64(off, 0, word) != 0:
                        raise RuntimeError("concurrent writer on a single-writer slot")
                    self.sidecar[key] = off
                    return touched
            nxt = _U64.unpack_from(buf, bucket + NEXT_PTR_OFFSET)[0]
            if nxt == 0:
                new = self._alloc_bucket()
                # fill the slot before the bucket becomes reachable
                region.cas64(new, 0, word)
                region.cas64(bucket + NEXT_PTR_OFFSET, 0, new)
                self.sidecar[key] = new
                return touched + 1
            bucket = nxt
            touched += 1

    def apply_delete(self, key: bytes, kh: KeyHash | None = None) -> bool:
        off = self.sidecar.pop(key, None)
        if off is None:
            return False
        prior = self.region.read64(off)
        self.region.cas64(off, prior, 0)
        return True

    def get(self, key: bytes) -> Slot | None:
        off = self.sidecar.get(key)
        if off is None:
            return None
        return unpack_slot(self.region.read64(off))

    def entries(self) -> Iterator[tuple[bytes, int, int]]:
        """(key, value_addr, item_len) for every occupied slot."""
        buf = self.region.buf
        for key, off in self.sidecar.items():
            slot = unpack_slot(_U64.unpack_from(buf, off)[0])
            yield key, slot.value_addr, slot.item_len

    def export_entries(self) -> Iterator[tuple[KeyHash, bytes, int, int]]:
        for key, addr, item_len in self.entries():
            yield key_hash(key), key, addr, item_len

    def chain_length(self, kh: KeyHash) -> int:
        buf = self.region.buf
        bucket = self.layout.bucket_offset(kh)
        n = 1
        while True:
            nxt = _U64.unpack_from(buf, bucket + NEXT_PTR_OFFSET)[0]
            if nxt == 0:
                return n
            bucket = nxt
            n += 1

    def bucket_reads_for(self, key: bytes, kh: KeyHash | None = None) -> int:
        """Buckets a client reads to resolve ``key`` (signature pre-filter only)."""
        kh = kh if kh is not None else key_hash(key)
        off = self.sidecar.get(key)
        buf = self.region.buf
        bucket = self.layout.bucket_offset(kh)
        n = 1
        while True:
            if off is not None and bucket <= off < bucket + NEXT_PTR_OFFSET:
                return n
            nxt = _U64.unpack_from(buf, bucket + NEXT_PTR_OFFSET)[0]
            if nxt == 0:
                return n
            bucket = nxt
            n += 1


def scan_region(buf: bytes, layout: HashTableLayout) -> list[tuple[int, Slot]]:
    """Brute-force parse of every bucket reachable from the primary array.

    Returns (slot offset, slot) for every occupied slot.  Raises ValueError
    if an occupied slot has a zero address or a chain pointer is invalid.
    """
    out = []
    lo = layout.overflow_area_offset
    hi = layout.region_bytes
    seen = set()
    for b in range(layout.primary_bucket_count):
        off = b * BUCKET_BYTES
        while True:
            if off in seen:
                raise ValueError(f"bucket {off} linked twice")
            seen.add(off)
            slots, nxt = decode_bucket(bytes(buf[off:off + BUCKET_BYTES]))
            for i, s in enumerate(slots):
                if s != EMPTY:
                    if s.value_addr == 0:
                        raise ValueError(f"occupied slot at {off + 8 * i} has address 0")
                    out.append((off + 8 * i, s))
            if nxt and not (lo <= nxt < hi and (nxt - lo) % BUCKET_BYTES == 0):
                raise ValueError(f"bad next pointer {nxt} in bucket {off}")
            off = nxt
            if off == 0:
                break
    return out


@dataclass
class LookupResult:
    value_addr: int
    item_len: int
    key: bytes
    value: bytes
    bucket_reads: int
    item_reads: int

    @property
    def round_trips(self) -> int:
        return self.bucket_reads + self.item_reads


def client_lookup(port, layout: HashTableLayout, key: bytes, read_item, kh: KeyHash | None = None,
                  tag: str | None = "get"):
    """One-sided lookup; generator returning ``(LookupResult | None, round_trips)``.

    ``read_item(addr, item_len)`` is a generator returning ``(key, value)``.
    """
    kh = kh if kh is not None else key_hash(key)
    sig = kh.signature
    offset = layout.bucket_offset(kh)
    bucket_reads = 0
    item_reads = 0
    while True:
        data = yield from port.read(layout.node, layout.region_id, offset, BUCKET_BYTES, tag=tag)
        bucket_reads += 1
        *words, nxt = _BUCKET.unpack(data)
        for w in words:
            if w and (w & 0xFF) == sig:
                item_len = (w >> 8) & 0xFF
                addr = w >> 16
                ikey, value = yield from read_item(addr, item_len)
                item_reads += 1
                if ikey == key:
                    res = LookupResult(addr, item_len, ikey, value, bucket_reads, item_reads)
                    return res, bucket_reads + item_reads
        if nxt == 0:
            return None, bucket_reads + item_reads
        offset = nxt
