"""Command line: ``histore bench <experiment> ...`` writes CSV files to ``--out``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from histore.bench import faults, micro
from histore.bench.harness import FillReadScanSpec, run_fill_read_scan, run_ycsb, write_csv, write_results
from histore.bench.workloads import YCSB_CLIENTS, YCSB_MIXES
from histore.cluster import Cluster
from histore.config import default_topology, load_topology
from histore.errors import ConfigError
from histore.index_group import MODES

EXPERIMENTS = ("fill-read-scan", "ycsb", "micro", "contention", "faults")


def _topology(args):
    topo = load_topology(args.config) if args.config else default_topology(
        seed=int(os.environ.get("SEED", 0)), backend=os.environ.get("BACKEND") or "sim")
    if args.seed is not None:
        topo.seed = args.seed
    if args.mode:
        topo.mode = args.mode
    return topo


def _bench_opt(args, topo, name, default):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return topo.bench.get(name, default)


def _cluster(topo, capacity: int):
    topo = replace(topo, groups=[replace(g, capacity=max(g.capacity, capacity)) for g in topo.groups])
    return Cluster(topo).bootstrap()


def cmd_fill_read_scan(args, topo):
    spec = FillReadScanSpec(
        preload=_bench_opt(args, topo, "preload", 1_000_000),
        puts=_bench_opt(args, topo, "puts", 200_000),
        gets=_bench_opt(args, topo, "gets", 200_000),
        scans=_bench_opt(args, topo, "scans", 10_000),
        clients=_bench_opt(args, topo, "clients", 16),
    )
    cluster = _cluster(topo, spec.preload + spec.puts)
    try:
        res = run_fill_read_scan(cluster, spec, seed=topo.seed)
    finally:
        cluster.close()
    write_results(args.out, [res])
    return [res]


def cmd_ycsb(args, topo):
    workloads = args.workload or topo.bench.get("workloads") or sorted(YCSB_MIXES)
    preload = _bench_opt(args, topo, "preload", 1_000_000)
    ops = _bench_opt(args, topo, "ops", 100_000)
    clients = _bench_opt(args, topo, "clients", YCSB_CLIENTS)
    results = []
    for w in workloads:
        cluster = _cluster(topo, preload + ops)
        try:
            results.append(run_ycsb(cluster, w, seed=topo.seed, preload=preload, ops=ops,
                                    clients=clients))
        finally:
            cluster.close()
    write_results(args.out, results)
    return results


def cmd_micro(args, topo):
    keys = args.keys or topo.bench.get("key_counts") or list(micro.DEFAULT_KEY_COUNTS)
    rows = []
    for index in ("hash", "skiplist"):
        rows += micro.run_index_microbench(index, keys, seed=topo.seed)
    write_csv(os.path.join(args.out, "micro.csv"), ("index", "keys", "mean_accesses", "lookups"),
              [(r.index, r.keys, r.mean, r.lookups) for r in rows])
    return rows


def cmd_contention(args, topo):
    clients = args.client_counts or topo.bench.get("client_counts") or list(micro.DEFAULT_CLIENTS)
    rows = []
    for path in ("hash-one-sided", "skiplist-rpc"):
        rows += micro.run_contention_bench(path, clients, cfg=topo.net, seed=topo.seed)
    write_csv(os.path.join(args.out, "contention.csv"), ("path", "clients", "mean", "oracle"),
              [(r.path, r.clients, r.mean, "" if r.oracle is None else r.oracle) for r in rows])
    return rows


def cmd_faults(args, topo):
    schedules = faults.load_schedules(args.schedule) if args.schedule else list(faults.DEFAULT_SCHEDULES)
    out = args.out
    timeline, summary = [], []
    for s in schedules:
        rep = faults.run_schedule(s, topo.mode, topo.seed)
        timeline += [(s.name, *row) for row in rep.timeline]
        for op, (ok, failed) in sorted(rep.ops.items()):
            summary.append((s.name, op, ok, failed, rep.availability(op), len(rep.lost_writes),
                            int(rep.quiesce_ok)))
    write_csv(os.path.join(out, "timeline.csv"), ("schedule", "t", "op", "ok", "failed"), timeline)
    write_csv(os.path.join(out, "schedules.csv"),
              ("schedule", "op", "ok", "failed", "availability", "lost_writes", "quiesce_ok"), summary)
    rows, extra = faults.degraded_ratios(topo.mode, topo.seed)
    write_csv(os.path.join(out, "degraded.csv"),
              ("state", "op", "throughput", "mean", "throughput_ratio", "latency_ratio"),
              [(r.state, r.op, r.throughput, r.mean, r.throughput_ratio, r.latency_ratio) for r in rows])
    keys = args.keys or topo.bench.get("key_counts") or [10_000, 100_000, 1_000_000]
    write_csv(os.path.join(out, "recovery.csv"), ("keys", "role", "duration"),
              faults.recovery_durations(keys, topo.mode, topo.seed))
    hz = faults.hazard_demo(args.crash_points, topo.seed, topo.mode)
    write_csv(os.path.join(out, "hazard.csv"), ("layout", "crash_points", "inconsistent"),
              [("split-index", hz.points, hz.split_violations),
               ("index-group", hz.points, hz.group_violations)])
    return extra


COMMANDS = {
    "fill-read-scan": cmd_fill_read_scan,
    "ycsb": cmd_ycsb,
    "micro": cmd_micro,
    "contention": cmd_contention,
    "faults": cmd_faults,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histore", description="hybrid-index KV store benchmarks")
    sub = p.add_subparsers(dest="command", required=True)
    bench = sub.add_parser("bench", help="run an experiment and write CSV files")
    bench.add_argument("experiment", choices=EXPERIMENTS)
    bench.add_argument("--config", help="TOML topology file")
    bench.add_argument("--mode", choices=MODES)
    bench.add_argument("--clients", type=int)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out", default="results")
    bench.add_argument("--preload", type=int)
    bench.add_argument("--puts", type=int)
    bench.add_argument("--gets", type=int)
    bench.add_argument("--scans", type=int)
    bench.add_argument("--ops", type=int, help="ycsb: operations per workload")
    bench.add_argument("--workload", action="append", choices=sorted(YCSB_MIXES),
                       help="ycsb workload (repeatable, default all)")
    bench.add_argument("--keys", type=int, action="append", help="micro/faults key counts")
    bench.add_argument("--client-counts", type=int, nargs="+", help="contention client counts")
    bench.add_argument("--schedule", help="faults: TOML schedule file")
    bench.add_argument("--crash-points", type=int, default=200)
    bench.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        topo = _topology(args)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.experiment](args, topo)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote results to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
