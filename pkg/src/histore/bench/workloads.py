"""Key generators and operation mixes for the benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from histore.errors import ConfigError
from histore.hash_index import fnv1a64

DB_KEY_BYTES = 16


def db_key(i: int) -> bytes:
    """db_bench style: 16 byte zero-padded decimal."""
    return b"%016d" % i


def ycsb_key(i: int) -> bytes:
    """YCSB style: 'user' + hashed id (about 20 bytes)."""
    return b"user%d" % fnv1a64(i.to_bytes(8, "little"))


def value_for(i: int, size: int, salt: int = 0) -> bytes:
    stem = b"v%d.%d-" % (i, salt)
    return (stem * (size // len(stem) + 1))[:size]


def zeta(n: int, theta: float) -> float:
    i = np.arange(1, n + 1, dtype=np.float64)
    return float(np.sum(i ** -theta))


class Zipfian:
    """Rank sampler following YCSB's rejection-free power-law method.

    Rank 0 is the most popular.  ``sample`` is vectorised.
    """

    def __init__(self, n: int, theta: float = 0.9, rng: np.random.Generator | None = None,
                 zetan: float | None = None):
        if n < 1:
            raise ConfigError("zipfian item count must be >= 1")
        if not 0 < theta <= 1:
            raise ConfigError("zipfian theta must be in (0, 1]")
        self.n = n
        self.theta = theta
        self.rng = rng or np.random.default_rng(0)
        self.zetan = zeta(n, theta) if zetan is None else zetan
        self.zeta2 = zeta(2, theta)
        self._cdf = None
        if theta >= 1.0 or n < 3:
            # the closed form divides by 1 - theta; fall back to an inverse CDF table
            w = np.arange(1, n + 1, dtype=np.float64) ** -theta
            self._cdf = np.cumsum(w) / self.zetan
            return
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - self.zeta2 / self.zetan)

    def mass(self, rank: int) -> float:
        return (rank + 1) ** -self.theta / self.zetan

    def sample(self, size: int | None = None):
        u = self.rng.random(size)
        if self._cdf is not None:
            r = np.minimum(np.searchsorted(self._cdf, u, side="right"), self.n - 1)
            return int(r) if size is None else r
        uz = u * self.zetan
        r = (self.n * (self.eta * u - self.eta + 1) ** self.alpha).astype(np.int64) \
            if size is not None else int(self.n * (self.eta * u - self.eta + 1) ** self.alpha)
        if size is None:
            if uz < 1.0:
                return 0
            if uz < 1.0 + 0.5 ** self.theta:
                return 1
            return min(r, self.n - 1)
        r = np.minimum(r, self.n - 1)
        r = np.where(uz < 1.0 + 0.5 ** self.theta, 1, r)
        r = np.where(uz < 1.0, 0, r)
        return r


class KeyChooser:
    """Maps the distribution over record ids; zipfian ids are scrambled."""

    def __init__(self, dist: str, n: int, theta: float = 0.9, seed: int = 0):
        self.dist = dist
        self.n = n
        self.rng = np.random.default_rng(seed)
        if dist in ("zipfian", "latest"):
            self.zipf = Zipfian(n, theta, self.rng)
        elif dist != "uniform":
            raise ConfigError(f"unknown key distribution {dist!r}")

    def next(self, count: int) -> int:
        """A record id in [0, count) where ``count`` is the current record count."""
        if self.dist == "uniform":
            return int(self.rng.integers(0, count))
        r = self.zipf.sample()
        if self.dist == "latest":
            return max(0, count - 1 - (r % count))
        return fnv1a64(r.to_bytes(8, "little")) % count


# ---------------------------------------------------------------------------
# operation mixes
# ---------------------------------------------------------------------------

OP_KINDS = ("put", "get", "update", "insert", "scan", "rmw", "delete")


@dataclass
class WorkloadSpec:
    preload: int = 1_000_000
    mix: dict = field(default_factory=lambda: {"get": 1.0})
    dist: str = "uniform"
    theta: float = 0.9
    key_size: int = DB_KEY_BYTES
    value_size: int = 32
    scan_count: int = 100
    clients: int = 16
    ops: int = 10_000
    key_format: str = "db"

    def validate(self) -> "WorkloadSpec":
        total = sum(self.mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"op mix sums to {total}, not 1")
        for k, v in self.mix.items():
            if k not in OP_KINDS:
                raise ConfigError(f"unknown op kind {k!r}")
            if v < 0:
                raise ConfigError(f"negative fraction for {k}")
        if not 0 < self.theta <= 1:
            raise ConfigError("theta must be in (0, 1]")
        if self.scan_count < 1 or self.clients < 1 or self.ops < 0 or self.preload < 0:
            raise ConfigError("scan_count and clients must be >= 1, counts >= 0")
        return self

    def key(self, i: int) -> bytes:
        return db_key(i) if self.key_format == "db" else ycsb_key(i)


# throughput comparisons are made near saturation, at the top of the 4-64 thread range
YCSB_CLIENTS = 64

YCSB_MIXES = {
    "A": {"get": 0.5, "update": 0.5},
    "B": {"get": 0.95, "update": 0.05},
    "C": {"get": 1.0},
    "D": {"get": 0.95, "insert": 0.05},
    "E": {"scan": 0.95, "insert": 0.05},
    "F": {"get": 0.5, "rmw": 0.5},
}


def ycsb_spec(workload: str, **overrides) -> WorkloadSpec:
    w = workload.upper()
    if w not in YCSB_MIXES:
        raise ConfigError(f"unknown YCSB workload {workload!r}")
    kw = dict(mix=dict(YCSB_MIXES[w]), dist="latest" if w == "D" else "zipfian", theta=0.9,
              scan_count=100, key_format="ycsb", value_size=32, clients=YCSB_CLIENTS)
    kw.update(overrides)
    return WorkloadSpec(**kw).validate()


def op_stream(spec: WorkloadSpec, seed: int):
    """Infinite iterator of op kinds drawn from ``spec.mix``."""
    rng = np.random.default_rng(seed)
    kinds = [k for k, v in spec.mix.items() if v > 0]
    probs = np.array([spec.mix[k] for k in kinds], dtype=float)
    probs /= probs.sum()
    while True:
        for i in rng.choice(len(kinds), size=4096, p=probs):
            yield kinds[i]
