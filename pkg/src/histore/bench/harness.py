"""Closed-loop benchmark driver shared by the fill/read/scan and YCSB runs."""

from __future__ import annotations

import csv
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from histore.bench.workloads import KeyChooser, WorkloadSpec, op_stream, value_for, ycsb_spec
from histore.errors import GroupUnavailable, HiStoreError, ScanUnavailable
from histore.trace import PHASES, PhaseTrace

log = logging.getLogger(__name__)

METRICS_HEADER = ("op", "count", "throughput", "mean", "p50", "p99")
PHASES_HEADER = ("op", "phase", "mean_fraction")
RECOVERY_HEADER = ("keys", "role", "duration")


class Recorder:
    """Per-op latency samples and phase fractions (one per client, merged at the end)."""

    def __init__(self):
        self.lat: dict[str, list] = defaultdict(list)
        self.frac: dict[str, dict] = defaultdict(lambda: defaultdict(float))
        self.coverage: dict[str, list] = defaultdict(list)
        self.errors: dict[str, int] = defaultdict(int)
        self.unsupported: set = set()
        self.window: dict[str, list] = {}

    def record(self, op: str, latency: float, trace: PhaseTrace | None = None) -> None:
        self.lat[op].append(latency)
        if trace is not None:
            fr = trace.fractions()
            for p in PHASES:
                self.frac[op][p] += fr[p]
            if latency > 0:
                self.coverage[op].append(trace.covered() / latency)

    def merge(self, other: "Recorder") -> None:
        for op, xs in other.lat.items():
            self.lat[op].extend(xs)
        for op, d in other.frac.items():
            for p, v in d.items():
                self.frac[op][p] += v
        for op, xs in other.coverage.items():
            self.coverage[op].extend(xs)
        for op, n in other.errors.items():
            self.errors[op] += n
        self.unsupported |= other.unsupported

    def metrics_rows(self, elapsed: dict | float) -> list:
        rows = []
        for op in sorted(set(self.lat) | self.unsupported):
            if op in self.unsupported and not self.lat.get(op):
                rows.append((op, 0, "N/A", "N/A", "N/A", "N/A"))
                continue
            xs = np.asarray(self.lat[op])
            span = elapsed[op] if isinstance(elapsed, dict) else elapsed
            thr = len(xs) / span if span > 0 else 0.0
            rows.append((op, len(xs), thr, float(xs.mean()), float(np.percentile(xs, 50)),
                         float(np.percentile(xs, 99))))
        return rows

    def phase_rows(self) -> list:
        rows = []
        for op in sorted(self.frac):
            n = len(self.lat[op])
            for p in PHASES:
                rows.append((op, p, self.frac[op][p] / n if n else 0.0))
        return rows

    def mean_fraction(self, op: str, phase: str) -> float:
        n = len(self.lat[op])
        return self.frac[op][phase] / n if n else 0.0

    def mean_latency(self, op: str) -> float:
        return float(np.mean(self.lat[op])) if self.lat.get(op) else float("nan")


@dataclass
class BenchResult:
    name: str
    mode: str
    recorder: Recorder
    elapsed: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def metrics(self) -> list:
        return self.recorder.metrics_rows(self.elapsed)

    def throughput(self, op: str | None = None) -> float:
        r = self.recorder
        if op is None:
            total = sum(len(v) for v in r.lat.values())
            span = self.elapsed.get("_all") or max(self.elapsed.values())
            return total / span if span else 0.0
        span = self.elapsed.get(op, self.elapsed.get("_all", 0.0))
        return len(r.lat.get(op, [])) / span if span else 0.0


def write_csv(path: str, header, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in row])


def write_results(outdir: str, results: list[BenchResult], recovery_rows=None) -> None:
    metrics, phases = [], []
    for res in results:
        prefix = f"{res.name}:" if len(results) > 1 else ""
        metrics += [(prefix + r[0], *r[1:]) for r in res.metrics()]
        phases += [(prefix + r[0], *r[1:]) for r in res.recorder.phase_rows()]
    write_csv(os.path.join(outdir, "metrics.csv"), METRICS_HEADER, metrics)
    write_csv(os.path.join(outdir, "phases.csv"), PHASES_HEADER, phases)
    if recovery_rows is not None:
        write_csv(os.path.join(outdir, "recovery.csv"), RECOVERY_HEADER, recovery_rows)


# ---------------------------------------------------------------------------
# driving clients
# ---------------------------------------------------------------------------


def _run_clients(cluster, clients, body, rec_per_client):
    """Run ``body(client, recorder)`` on every client; returns elapsed time."""
    rt = cluster.rt

    def main():
        for c in clients:
            if c.view is None:
                yield from c.connect()
        t0 = rt.now()
        tasks = [rt.spawn(body(c, r), name=f"client{c.client_id}")
                 for c, r in zip(clients, rec_per_client)]
        results = yield from rt.wait_all(tasks)
        for ok, res in results:
            if not ok:
                raise res
        return rt.now() - t0

    return cluster.run(main())


def _timed(rt, rec: Recorder, name: str, gen):
    trace = PhaseTrace()
    t0 = rt.now()
    try:
        out = yield from gen(trace)
    except ScanUnavailable:
        rec.unsupported.add(name)
        return None
    except (GroupUnavailable, HiStoreError):
        rec.errors[name] += 1
        return None
    rec.record(name, rt.now() - t0, trace)
    return out


def ensure_clients(cluster, n: int):
    while len(cluster.clients) < n:
        cluster.client()
    return cluster.clients[:n]


@dataclass
class FillReadScanSpec:
    preload: int = 1_000_000
    puts: int = 200_000
    gets: int = 200_000
    scans: int = 10_000
    clients: int = 16
    value_size: int = 32
    scan_count: int = 100


def _phase(cluster, clients, total: int, make_op, seed: int):
    rt = cluster.rt
    recs = [Recorder() for _ in clients]
    left = [total]

    def body(c, rec):
        rng = np.random.default_rng((seed << 8) + c.client_id)
        while left[0] > 0:
            left[0] -= 1
            name, fn = make_op(c, rng)
            yield from _timed(rt, rec, name, fn)

    elapsed = _run_clients(cluster, clients, body, recs)
    merged = Recorder()
    for r in recs:
        merged.merge(r)
    return merged, elapsed


def run_fill_read_scan(cluster, spec: FillReadScanSpec | None = None, seed: int = 0,
                       load: bool = True) -> BenchResult:
    """Preload, then a PUT phase, a GET phase and a SCAN phase."""
    spec = spec or FillReadScanSpec()
    n = max(1, spec.preload)
    if load and spec.preload:
        wspec = WorkloadSpec(preload=spec.preload)
        cluster.preload((wspec.key(i), value_for(i, spec.value_size)) for i in range(spec.preload))
    clients = ensure_clients(cluster, spec.clients)
    key = WorkloadSpec().key
    total = Recorder()
    elapsed = {}

    def put_op(c, rng):
        i = int(rng.integers(0, n))
        v = value_for(i, spec.value_size, salt=int(rng.integers(1, 1 << 30)))
        return "put", lambda tr: c.put(key(i), v, tr)

    def get_op(c, rng):
        i = int(rng.integers(0, n))
        return "get", lambda tr: c.get(key(i), tr)

    def scan_op(c, rng):
        i = int(rng.integers(0, n))
        return "scan", lambda tr: c.scan(key(i), spec.scan_count, tr)

    for name, count, fn in (("put", spec.puts, put_op), ("get", spec.gets, get_op),
                            ("scan", spec.scans, scan_op)):
        if count <= 0:
            continue
        rec, el = _phase(cluster, clients, count, fn, seed)
        total.merge(rec)
        elapsed[name] = el
    return BenchResult("fill-read-scan", cluster.mode, total, elapsed)


def run_ycsb(cluster, workload: str, spec: WorkloadSpec | None = None, seed: int = 0,
             load: bool = True, **overrides) -> BenchResult:
    """One YCSB workload; ``overrides`` replace fields of the standard spec."""
    spec = spec or ycsb_spec(workload, **overrides)
    if load and spec.preload:
        cluster.preload((spec.key(i), value_for(i, spec.value_size)) for i in range(spec.preload))
    clients = ensure_clients(cluster, spec.clients)
    rt = cluster.rt
    recs = [Recorder() for _ in clients]
    # "records" counts issued inserts; reads only pick among acked ones, as YCSB does
    state = {"left": spec.ops, "records": max(1, spec.preload), "acked": max(1, spec.preload)}
    done_inserts: set = set()

    def insert_done(i):
        done_inserts.add(i)
        while state["acked"] in done_inserts:
            done_inserts.discard(state["acked"])
            state["acked"] += 1

    def body(c, rec):
        chooser = KeyChooser(spec.dist, max(1, spec.preload), spec.theta, seed=(seed << 8) + c.client_id)
        kinds = op_stream(spec, (seed << 8) + c.client_id + 7)
        rng = np.random.default_rng((seed << 8) + c.client_id + 13)
        while state["left"] > 0:
            state["left"] -= 1
            kind = next(kinds)
            if kind == "insert":
                i = state["records"]
                state["records"] += 1
                v = value_for(i, spec.value_size)
                yield from _timed(rt, rec, "insert", lambda tr: c.put(spec.key(i), v, tr))
                insert_done(i)
                continue
            i = chooser.next(state["acked"])
            k = spec.key(i)
            if kind == "get":
                yield from _timed(rt, rec, "get", lambda tr: c.get(k, tr))
            elif kind in ("update", "put"):
                v = value_for(i, spec.value_size, salt=int(rng.integers(1, 1 << 30)))
                yield from _timed(rt, rec, kind, lambda tr: c.update(k, v, tr))
            elif kind == "scan":
                yield from _timed(rt, rec, "scan", lambda tr: c.scan(k, spec.scan_count, tr))
            elif kind == "rmw":
                v = value_for(i, spec.value_size, salt=int(rng.integers(1, 1 << 30)))

                def rmw(tr, k=k, v=v):
                    yield from c.get(k, tr)
                    yield from c.update(k, v, tr)
                yield from _timed(rt, rec, "rmw", rmw)
            elif kind == "delete":
                yield from _timed(rt, rec, "delete", lambda tr: c.delete(k, tr))

    elapsed = _run_clients(cluster, clients, body, recs)
    merged = Recorder()
    for r in recs:
        merged.merge(r)
    el = {op: elapsed for op in merged.lat}
    el["_all"] = elapsed
    return BenchResult(f"ycsb-{workload.upper()}", cluster.mode, merged, el,
                       {"errors": dict(merged.errors)})
