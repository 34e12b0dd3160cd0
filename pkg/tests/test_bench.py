import pytest

from pmo import ConfigError, PmoSystem, SyncConfig
from pmo.bench import (device_size_for, ensure_pmo, measure_psync_latency, open_bench_device,
                       run_workload, time_recovery)
from pmo.linkedlist import read_list

SMALL = 1 << 20


@pytest.fixture
def bench_system(tmp_path):
    dev = open_bench_device(tmp_path / "bench.img", SMALL)
    yield PmoSystem.open(dev)
    dev.close()


def test_device_size_fits_pmo_and_shadow(tmp_path):
    dev = open_bench_device(tmp_path / "b.img", 64 << 20, sync=False)
    s = PmoSystem.open(dev)
    ensure_pmo(s, "x", 64 << 20)
    s.attach("x", "w", "bench").detach()
    assert dev.size == device_size_for(64 << 20)
    dev.close()


def test_dirty_minimality(bench_system):
    ensure_pmo(bench_system, "x", SMALL)
    for dirty in (1, 7, SMALL // 4096):
        _, counts = measure_psync_latency(bench_system, "x", dirty, reps=2)
        assert counts == [dirty, dirty]


@pytest.mark.parametrize("workload", ["seqwrite", "randwrite"])
@pytest.mark.parametrize("threads", [1, 3])
def test_write_workloads(bench_system, workload, threads):
    res = run_workload(bench_system, workload, SyncConfig(0.01, threads), 0.15, SMALL)
    assert res.ops > 0 and res.psyncs >= 1
    assert len(res.pages_copied) == res.psyncs == len(res.latencies)
    assert max(res.pages_copied) <= SMALL // 4096
    assert any(line.startswith("psync_latency_us p50") for line in res.lines())


def test_linkedlist_workload_reattaches(bench_system):
    res = run_workload(bench_system, "linkedlist", SyncConfig(0.02, 2), 0.2, SMALL)
    assert res.ops > 0 and res.list_length == res.ops
    assert len(read_list(bench_system, "bench-linkedlist", "bench")) == res.ops


def test_unknown_workload(bench_system):
    with pytest.raises(ConfigError):
        run_workload(bench_system, "fileserver", SyncConfig(0.01), 0.1)


def test_recovery_copies_match_dirty_count(tmp_path):
    _, copies = time_recovery(tmp_path / "r.img", SMALL, reps=2, sync=False)
    assert copies == [SMALL // 4096] * 2
