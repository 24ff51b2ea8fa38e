"""Data servers: append-only item storage addressed by 6-byte value addresses.

StoredItem layout: ``[key_len:2][value_len:2][key][value]`` (little-endian),
at most 255 bytes so the length fits a hash slot.  Items start on 8-byte
boundaries; offset 0 of every region is never issued, which keeps value
address 0 free to mean "empty".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from histore.errors import BadRequest, CorruptItem, RpcError

MAX_ITEM = 255
ITEM_HEADER = 4
OFFSET_BITS = 40
OFFSET_MASK = (1 << OFFSET_BITS) - 1
FIRST_OFFSET = 8

_HDR = struct.Struct("<HH")
_STORE_REPLY = struct.Struct("<QB")


class RegionFull(RpcError):
    code = "region_full"


def pack_addr(server_tag: int, offset: int) -> int:
    if not 0 <= server_tag <= 0xFF:
        raise ValueError("server tag is one byte")
    if not 0 <= offset <= OFFSET_MASK:
        raise ValueError("offset is five bytes")
    addr = (server_tag << OFFSET_BITS) | offset
    if addr == 0:
        raise ValueError("value address 0 is reserved")
    return addr


def unpack_addr(addr: int) -> tuple[int, int]:
    return addr >> OFFSET_BITS, addr & OFFSET_MASK


def encode_item(key: bytes, value: bytes) -> bytes:
    n = ITEM_HEADER + len(key) + len(value)
    if n > MAX_ITEM:
        raise ValueError(f"item of {n} bytes exceeds {MAX_ITEM}")
    if not key:
        raise ValueError("empty key")
    return _HDR.pack(len(key), len(value)) + key + value


def decode_item(data: bytes) -> tuple[bytes, bytes]:
    if len(data) < ITEM_HEADER:
        raise CorruptItem("item shorter than its header")
    klen, vlen = _HDR.unpack_from(data)
    if ITEM_HEADER + klen + vlen != len(data):
        raise CorruptItem(f"item header says {ITEM_HEADER + klen + vlen} bytes, read {len(data)}")
    return bytes(data[4:4 + klen]), bytes(data[4 + klen:])


def item_len(key: bytes, value: bytes) -> int:
    return ITEM_HEADER + len(key) + len(value)


@dataclass(frozen=True)
class DataServerInfo:
    tag: int
    node: int
    region_id: int

    def to_dict(self) -> dict:
        return {"tag": self.tag, "node": self.node, "region_id": self.region_id}

    @classmethod
    def from_dict(cls, d: dict) -> "DataServerInfo":
        return cls(d["tag"], d["node"], d["region_id"])


class DataServer:
    """Owns one region and appends items to it through the ``store`` endpoint."""

    def __init__(self, net, node: int, tag: int, region_bytes: int, costs=None):
        self.net = net
        self.node = node
        self.tag = tag
        self.region = net.register_region(node, region_bytes)
        self.cursor = FIRST_OFFSET
        self.costs = costs
        self._lock = net.rt.lock()
        net.serve(node, "store", self.handle_store)

    @property
    def info(self) -> DataServerInfo:
        return DataServerInfo(self.tag, self.node, self.region.region_id)

    def append(self, item: bytes) -> int:
        n = len(item)
        with self._lock:
            off = self.cursor
            end = off + n
            if end > self.region.size:
                raise RegionFull(f"data server {self.node} region full")
            self.cursor = (end + 7) & ~7
        self.region.write(off, item)
        return pack_addr(self.tag, off)

    def store(self, key: bytes, value: bytes) -> tuple[int, int]:
        item = encode_item(key, value)
        return self.append(item), len(item)

    def local_read(self, addr: int, length: int) -> tuple[bytes, bytes]:
        tag, off = unpack_addr(addr)
        if tag != self.tag:
            raise CorruptItem(f"address {addr:#x} belongs to server tag {tag}")
        return decode_item(self.region.read(off, length))

    def handle_store(self, payload: bytes, ctx):
        try:
            decode_item(payload)
        except CorruptItem as exc:
            raise BadRequest(str(exc)) from None
        if len(payload) > MAX_ITEM:
            raise BadRequest("oversize item")
        if self.costs is not None:
            yield from ctx.compute(self.costs.data_append)
        addr = self.append(payload)
        return _STORE_REPLY.pack(addr, len(payload))


def store_item(port, server: DataServerInfo, key: bytes, value: bytes, tag: str | None = "put"):
    """RPC the item to ``server``; generator returning ``(addr, item_len, reply)``."""
    item = encode_item(key, value)
    reply = yield from port.call_ex(server.node, "store", item, tag=tag)
    addr, n = _STORE_REPLY.unpack(reply.body)
    return addr, n, reply


def read_item(port, servers: dict, addr: int, length: int, tag: str | None = "get"):
    """One one-sided read of ``length`` bytes; generator returning (key, value)."""
    server_tag, off = unpack_addr(addr)
    info = servers[server_tag]
    data = yield from port.read(info.node, info.region_id, off, length, tag=tag)
    return decode_item(data)


def read_items(port, servers: dict, refs, tag: str | None = "scan"):
    """Pipelined reads of [(addr, item_len)]; generator returning [(key, value)]."""
    reads = []
    for addr, length in refs:
        server_tag, off = unpack_addr(addr)
        info = servers[server_tag]
        reads.append((info.node, info.region_id, off, length))
    raw = yield from port.read_many(reads, tag=tag)
    return [decode_item(d) for d in raw]
