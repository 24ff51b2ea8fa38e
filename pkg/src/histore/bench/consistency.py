"""Randomised concurrent histories for the consistency checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from histore.checker import DELETE, GET, PUT, SCAN, History, check_history
from histore.cluster import make_cluster
from histore.errors import HiStoreError

DEFAULT_MIX = {PUT: 0.4, GET: 0.35, SCAN: 0.15, DELETE: 0.1}


@dataclass
class RandomRun:
    cluster: object
    history: History
    universe: list
    oracle: dict = field(default_factory=dict)  # only exact when writes are striped
    failed: int = 0


def random_history(seed: int, ops: int = 10_000, clients: int = 8, keys: int = 64,
                   mode: str = "hybrid", mix: dict | None = None, scan_max: int = 10,
                   striped: bool = False, groups: int = 1) -> RandomRun:
    """Drive ``clients`` closed-loop clients through ``ops`` random operations.

    With ``striped`` each client writes only keys ``k`` with
    ``k % clients == client``, so the last acked write per key is the final
    state and ``oracle`` is exact.
    """
    mix = mix or DEFAULT_MIX
    kinds = list(mix)
    probs = np.array([mix[k] for k in kinds], dtype=float)
    probs /= probs.sum()
    cluster = make_cluster(mode, seed=seed, groups=groups, capacity=max(4096, 4 * keys))
    rt = cluster.rt
    universe = [b"k%06d" % i for i in range(keys)]
    hist = History(rt.stamp)
    cl = [cluster.client() for _ in range(clients)]
    left = [ops]
    run = RandomRun(cluster, hist, universe)

    def body(idx, c):
        rng = np.random.default_rng((seed << 12) + idx)
        n = 0
        draws = iter(())
        while left[0] > 0:
            left[0] -= 1
            try:
                ki, k, count = next(draws)
            except StopIteration:
                # numpy per-call overhead dominates single draws, so draw in blocks
                draws = zip(rng.choice(len(kinds), size=1024, p=probs).tolist(),
                            rng.integers(0, keys, size=1024).tolist(),
                            rng.integers(1, scan_max + 1, size=1024).tolist())
                ki, k, count = next(draws)
            kind = kinds[ki]
            if striped and kind in (PUT, DELETE):
                k = k - k % clients + idx
                if k >= keys:
                    k -= clients
            key = universe[k]
            if kind == PUT:
                n += 1
                value = b"c%d.%d" % (idx, n)
                op = hist.begin(idx, PUT, key, value)
                gen = c.put(key, value)
            elif kind == DELETE:
                op = hist.begin(idx, DELETE, key)
                gen = c.delete(key)
            elif kind == GET:
                op = hist.begin(idx, GET, key)
                gen = c.get(key)
            else:
                op = hist.begin(idx, SCAN, key, count)
                gen = c.scan(key, count)
            try:
                result = yield from gen
            except HiStoreError:
                hist.fail(op)
                run.failed += 1
                continue
            hist.end(op, result if kind in (GET, SCAN) else None)
            if kind == PUT:
                run.oracle[key] = op.value
            elif kind == DELETE:
                run.oracle.pop(key, None)

    def main():
        for c in cl:
            yield from c.connect()
        tasks = [rt.spawn(body(i, c), name=f"client{i}") for i, c in enumerate(cl)]
        for ok, exc in (yield from rt.wait_all(tasks)):
            if not ok:
                raise exc

    cluster.run(main())
    return run


def check_run(run: RandomRun):
    return check_history(run.history, {}, run.universe)
