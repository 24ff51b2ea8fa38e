"""Backend-independent transport pieces: configuration, memory regions, counters."""

from __future__ import annotations

import csv
import io
import mmap
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field, fields

from histore.errors import ConfigError, MemoryFault

US = 1e-6

# regions at least this large are anonymous mappings, so untouched pages cost no memory
LAZY_REGION_BYTES = 1 << 20

_U64 = struct.Struct("<Q")

OP_CLASSES = ("one_sided_read", "one_sided_write", "cas", "rpc")


@dataclass
class NetConfig:
    """Simulated network and server-CPU parameters (all durations in seconds).

    The first four fields are the main calibration knobs.  ``issue_cost``
    serialises operations posted on the same queue pair and ``bandwidth``
    adds a per-byte transfer time.  ``timeout`` bounds every remote operation.
    """

    one_sided_rtt: float = 2 * US
    rpc_rtt: float = 3 * US
    per_request_cpu_cost: float = 1 * US
    rpc_threads_per_node: int = 4
    issue_cost: float = 0.5 * US
    bandwidth: float = 12.5e9
    timeout: float = 1000 * US

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("one_sided_rtt", "rpc_rtt", "per_request_cpu_cost", "issue_cost"):
            if getattr(self, name) < 0:
                raise ConfigError(f"net.{name} must be >= 0")
        if self.rpc_threads_per_node < 1:
            raise ConfigError("net.rpc_threads_per_node must be >= 1")
        if self.bandwidth <= 0:
            raise ConfigError("net.bandwidth must be > 0")
        if self.timeout <= 0:
            raise ConfigError("net.timeout must be > 0")

    @classmethod
    def from_section(cls, section: dict) -> "NetConfig":
        """Build from a ``[net]`` config table; ``*_us`` keys are microseconds."""
        kw = {}
        names = {f.name for f in fields(cls)}
        for key, value in section.items():
            if key.endswith("_us") and key[:-3] in names:
                kw[key[:-3]] = float(value) * US
            elif key in names:
                kw[key] = value
            else:
                raise ConfigError(f"net.{key}: unknown field")
        return cls(**kw)


@dataclass
class CostModel:
    """Server-side CPU time charged for index and log work (seconds)."""

    log_append: float = 0.05 * US
    hash_apply: float = 0.05 * US
    skiplist_visit: float = 0.025 * US
    skiplist_link: float = 0.1 * US
    data_append: float = 0.05 * US
    export_entry: float = 0.02 * US
    hash_build_entry: float = 0.05 * US
    sort_compare: float = 0.01 * US
    merge_entry: float = 0.01 * US

    @classmethod
    def from_section(cls, section: dict) -> "CostModel":
        kw = {}
        names = {f.name for f in fields(cls)}
        for key, value in section.items():
            base = key[:-3] if key.endswith("_us") else key
            if base not in names:
                raise ConfigError(f"cost.{key}: unknown field")
            kw[base] = float(value) * (US if key.endswith("_us") else 1.0)
        return cls(**kw)


class MemRegion:
    """A registered, zero-initialised byte region owned by one node.

    Local accessors are what the owning server's CPU uses; remote peers go
    through the transport.  All accessors hold the region lock, which gives
    word atomicity under real threads (the simulation is single threaded).
    """

    __slots__ = ("region_id", "node", "buf", "lock")

    def __init__(self, region_id: int, node: int, size: int):
        self.region_id = region_id
        self.node = node
        self.buf = mmap.mmap(-1, size) if size >= LAZY_REGION_BYTES else bytearray(size)
        self.lock = threading.Lock()

    @property
    def size(self) -> int:
        return len(self.buf)

    def check(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > len(self.buf):
            raise MemoryFault(
                f"region {self.region_id}: [{offset}, {offset + length}) outside {len(self.buf)} bytes"
            )

    def read(self, offset: int, length: int) -> bytes:
        self.check(offset, length)
        with self.lock:
            return bytes(self.buf[offset:offset + length])

    def write(self, offset: int, data: bytes) -> None:
        self.check(offset, len(data))
        with self.lock:
            self.buf[offset:offset + len(data)] = data

    def read64(self, offset: int) -> int:
        self.check(offset, 8)
        return _U64.unpack_from(self.buf, offset)[0]

    def write64(self, offset: int, value: int) -> None:
        self.check(offset, 8)
        with self.lock:
            _U64.pack_into(self.buf, offset, value)

    def cas64(self, offset: int, expected: int, new: int) -> int:
        if offset % 8:
            raise MemoryFault(f"cas at unaligned offset {offset}")
        self.check(offset, 8)
        with self.lock:
            prior = _U64.unpack_from(self.buf, offset)[0]
            if prior == expected:
                _U64.pack_into(self.buf, offset, new)
            return prior


class TransportCounters:
    """Operation counts keyed by (target node, op class, cause tag)."""

    def __init__(self):
        self._c: Counter = Counter()
        self._lock = threading.Lock()

    def inc(self, node: int, op_class: str, tag: str | None = None, n: int = 1) -> None:
        with self._lock:
            self._c[(node, op_class, tag)] += n

    def get(self, node: int | None = None, op_class: str | None = None, tag: str | None = None) -> int:
        total = 0
        with self._lock:
            for (n, oc, t), v in self._c.items():
                if node is not None and n != node:
                    continue
                if op_class is not None and oc != op_class:
                    continue
                if tag is not None and t != tag:
                    continue
                total += v
        return total

    def reset(self) -> None:
        with self._lock:
            self._c.clear()

    def rows(self) -> list[tuple[int, str, int]]:
        agg: Counter = Counter()
        with self._lock:
            for (n, oc, _t), v in self._c.items():
                agg[(n, oc)] += v
        return sorted((n, oc, v) for (n, oc), v in agg.items())

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["node", "op_class", "count"])
        w.writerows(self.rows())
        return out.getvalue()


@dataclass
class Reply:
    body: bytes
    phases: dict = field(default_factory=dict)
    elapsed: float = 0.0
