import csv
import os

import numpy as np
import pytest

from histore.bench import micro
from histore.bench.cli import main as cli_main
from histore.bench.faults import FaultSchedule, load_schedules, run_schedule
from histore.bench.harness import FillReadScanSpec, run_fill_read_scan, run_ycsb
from histore.bench.workloads import (
    KeyChooser, WorkloadSpec, Zipfian, db_key, op_stream, value_for, ycsb_key, ycsb_spec, zeta,
)
from histore.cluster import make_cluster
from histore.errors import ConfigError


def test_zipf_hottest_key_mass():
    z = Zipfian(10**6, 0.9, np.random.default_rng(5))
    s = z.sample(10**7)
    assert s.min() == 0 and s.max() < 10**6
    expected = 1.0 / zeta(10**6, 0.9)
    assert z.mass(0) == pytest.approx(expected)
    got = np.count_nonzero(s == 0) / s.size
    assert abs(got - expected) / expected < 0.05
    got1 = np.count_nonzero(s == 1) / s.size
    assert abs(got1 - z.mass(1)) / z.mass(1) < 0.05


def test_zipf_theta_one_and_scalar_samples():
    z = Zipfian(1000, 1.0, np.random.default_rng(1))
    s = z.sample(200_000)
    assert abs(np.count_nonzero(s == 0) / s.size - z.mass(0)) < 0.01
    assert isinstance(Zipfian(100, 0.9).sample(), int)
    with pytest.raises(ConfigError):
        Zipfian(10, 1.5)


def test_key_choosers_stay_in_range():
    for dist in ("uniform", "zipfian", "latest"):
        ch = KeyChooser(dist, 1000, seed=3)
        picks = [ch.next(1000) for _ in range(2000)]
        assert 0 <= min(picks) and max(picks) < 1000
    latest = KeyChooser("latest", 1000, seed=3)
    picks = [latest.next(1000) for _ in range(20_000)]
    # the newest record takes the rank-0 mass
    assert picks.count(999) / len(picks) == pytest.approx(latest.zipf.mass(0), rel=0.1)
    with pytest.raises(ConfigError):
        KeyChooser("pareto", 10)


def test_key_formats_and_values():
    assert db_key(42) == b"0000000000000042"
    assert ycsb_key(1).startswith(b"user") and ycsb_key(1) != ycsb_key(2)
    assert len(value_for(7, 32)) == 32 and value_for(7, 32) != value_for(7, 32, salt=1)


def test_workload_specs():
    assert ycsb_spec("C").mix == {"get": 1.0}
    assert ycsb_spec("d").dist == "latest"
    assert ycsb_spec("E").scan_count == 100 and ycsb_spec("E").theta == 0.9
    with pytest.raises(ConfigError):
        ycsb_spec("G")
    with pytest.raises(ConfigError):
        WorkloadSpec(mix={"get": 0.5}).validate()
    with pytest.raises(ConfigError):
        WorkloadSpec(mix={"frob": 1.0}).validate()
    kinds = op_stream(ycsb_spec("B"), 0)
    draws = [next(kinds) for _ in range(20_000)]
    assert abs(draws.count("update") / len(draws) - 0.05) < 0.01


def test_ycsb_c_is_read_only_and_f_is_read_modify_write():
    c = run_ycsb(make_cluster("hybrid", seed=0, capacity=4096), "C", preload=1000, ops=500, clients=8)
    assert set(c.recorder.lat) == {"get"} and len(c.recorder.lat["get"]) == 500
    cluster = make_cluster("hybrid", seed=0, capacity=4096)
    f = run_ycsb(cluster, "F", preload=1000, ops=500, clients=8)
    assert set(f.recorder.lat) == {"get", "rmw"}
    # a read-modify-write costs at least a GET plus an update
    assert f.recorder.mean_latency("rmw") > f.recorder.mean_latency("get")
    assert not cluster.rt.task_failures


def test_scans_are_not_applicable_in_all_hash_mode():
    res = run_ycsb(make_cluster("all-hash", seed=0, capacity=4096), "E", preload=1000, ops=300,
                   clients=4)
    rows = {r[0]: r for r in res.metrics()}
    assert rows["scan"][1:] == (0, "N/A", "N/A", "N/A", "N/A")
    assert rows["insert"][1] > 0


def test_phase_fractions_cover_the_critical_path():
    res = run_fill_read_scan(make_cluster("hybrid", seed=1, capacity=8192),
                             FillReadScanSpec(preload=2000, puts=400, gets=400, scans=40, clients=8))
    for op in ("put", "get", "scan"):
        cov = res.recorder.coverage[op]
        assert len(cov) == len(res.recorder.lat[op])
        assert min(cov) >= 0.95 and max(cov) <= 1.05, op
        total = sum(res.recorder.mean_fraction(op, p) for p in
                    ("index_rpc", "queue_wait", "index_access", "log_sync", "data_access"))
        assert total == pytest.approx(1.0, abs=0.05)


def test_index_microbench_small():
    rows = micro.run_index_microbench("hash", (1000, 4000), lookups=2000)
    assert all(1.0 <= r.mean <= 1.5 for r in rows)
    sl = micro.run_index_microbench("skiplist", (1000, 16000), lookups=2000)
    assert sl[1].mean > sl[0].mean
    with pytest.raises(ValueError):
        micro.run_index_microbench("btree", (10,))


def test_queueing_oracle():
    assert micro.queueing_oracle(1, 3.0, 1.0, 4) == 4.0
    assert micro.queueing_oracle(64, 3.0, 1.0, 4) == 16.0


def test_contention_small():
    rows = micro.run_contention_bench("skiplist-rpc", (4, 32), keys=5000, ops_per_client=50)
    assert rows[1].mean > rows[0].mean
    assert rows[1].mean == pytest.approx(rows[1].oracle, rel=0.15)
    flat = micro.run_contention_bench("hash-one-sided", (4, 32), keys=5000, ops_per_client=50)
    assert flat[1].mean == pytest.approx(flat[0].mean, rel=0.1)


def test_schedule_loader(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text('[[schedule]]\nname = "x"\ntarget = "backup"\nat_op = 10\nops = 100\n'
                 'mix = { get = 0.5, put = 0.5 }\n')
    (s,) = load_schedules(p)
    assert (s.name, s.target, s.at_op, s.mix) == ("x", "backup", 10, {"get": 0.5, "put": 0.5})
    p.write_text('[[schedule]]\nname = "x"\ntarget = "moon"\n')
    with pytest.raises(ConfigError):
        load_schedules(p)
    p.write_text('[[schedule]]\nname = "x"\nbogus = 1\n')
    with pytest.raises(ConfigError):
        load_schedules(p)
    p.write_text("")
    with pytest.raises(ConfigError):
        load_schedules(p)


def test_small_backup_crash_schedule():
    rep = run_schedule(FaultSchedule("b", "backup", at_op=200, ops=800, preload=1000, clients=4))
    assert rep.quiesce_ok, rep.quiesce_summary
    assert not rep.lost_writes
    assert rep.availability("get") == 1.0 and rep.availability("scan") == 1.0
    assert rep.recoveries and rep.recoveries[0].role == "backup"


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_cli_runs_are_deterministic(tmp_path):
    args = ["bench", "fill-read-scan", "--seed", "3", "--preload", "500", "--puts", "100",
            "--gets", "100", "--scans", "10", "--clients", "4"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli_main(args + ["--out", str(a)]) == 0
    assert cli_main(args + ["--out", str(b)]) == 0
    for name in ("metrics.csv", "phases.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = _read(a / "metrics.csv")
    assert rows[0] == ["op", "count", "throughput", "mean", "p50", "p99"]
    assert {r[0] for r in rows[1:]} == {"put", "get", "scan"}


def test_cli_micro_contention_and_ycsb(tmp_path):
    out = str(tmp_path)
    assert cli_main(["bench", "micro", "--keys", "1000", "--keys", "2000", "--out", out]) == 0
    rows = _read(os.path.join(out, "micro.csv"))
    assert len(rows) == 5 and rows[0][0] == "index"
    assert cli_main(["bench", "contention", "--client-counts", "4", "8", "--out", out]) == 0
    assert len(_read(os.path.join(out, "contention.csv"))) == 5
    assert cli_main(["bench", "ycsb", "--workload", "A", "--workload", "E", "--preload", "500",
                     "--ops", "200", "--clients", "4", "--mode", "all-hash", "--out", out]) == 0
    names = {r[0] for r in _read(os.path.join(out, "metrics.csv"))[1:]}
    assert "ycsb-E:scan" in names and "ycsb-A:get" in names


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[nodes]\ncontrol = [0]\nindex = [1, 2]\ndata = [4]\n"
                   "[[groups.group]]\nprimary = 1\nbackups = [2, 3]\n")
    assert cli_main(["bench", "micro", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli_main(["bench", "nope"])
