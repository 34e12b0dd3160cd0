"""Workloads and timing helpers on the memory-mapped backend.

Workers write into one write-attached PMO; whenever ``delta`` seconds have
passed since the previous synchronization point, every worker meets at a
barrier whose action runs ``psync`` once, so no write is in flight during a
psync.  Numbers are relative: they show how costs scale, not absolute speed.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .layout import format_device, metadata_region_size, read_header
from .linkedlist import PersistentList
from .pmem import PAGE_SIZE, MappedDevice
from .store import PmoSystem, SyncConfig
from ._kernels import bitmap_pages

WORKLOADS = ("seqwrite", "randwrite", "linkedlist")
DEFAULT_PMO_SIZE = 64 << 20
BENCH_KEY = "bench"


def device_size_for(pmo_size: int, max_pmos: int = 16) -> int:
    """Bytes needed for one PMO of ``pmo_size`` plus its shadow, with a page of slack."""
    pages = -(-pmo_size // PAGE_SIZE)
    return PAGE_SIZE * (1 + 2 * pages + bitmap_pages(pages) + 1) + metadata_region_size(max_pmos)


def open_bench_device(path, pmo_size: int, sync: bool = True) -> MappedDevice:
    """Map ``path``, formatting a fresh image when it is missing or unformatted."""
    if os.path.exists(path):
        dev = MappedDevice(path, sync=sync)
        try:
            read_header(dev)
            return dev
        except Exception:
            dev.close()
    dev = MappedDevice.create(path, device_size_for(pmo_size), sync=sync)
    format_device(dev, "bench", 16)
    return dev


def ensure_pmo(system: PmoSystem, name: str, size: int) -> None:
    e = system.vol.lookup_entry(name)
    if e is not None and e.size != -(-size // PAGE_SIZE) * PAGE_SIZE:
        system.pdestroy(name, BENCH_KEY)
        e = None
    if e is None:
        system.pcreate(name, size, BENCH_KEY)


def _percentiles(xs) -> dict:
    if not xs:
        return {"p50": 0.0, "p90": 0.0, "p99": 0.0}
    a = np.asarray(xs)
    return {f"p{q}": float(np.percentile(a, q)) for q in (50, 90, 99)}


@dataclass
class BenchResult:
    workload: str
    threads: int
    ops: int
    seconds: float
    psyncs: int
    pages_copied: list = field(default_factory=list)
    latencies: list = field(default_factory=list)
    list_length: int | None = None

    @property
    def ops_per_s(self) -> float:
        return self.ops / self.seconds if self.seconds > 0 else 0.0

    @property
    def pages_per_psync(self) -> float:
        return float(np.mean(self.pages_copied)) if self.pages_copied else 0.0

    def lines(self) -> list[str]:
        pct = _percentiles(self.latencies)
        out = [f"workload {self.workload} threads {self.threads} duration_s {self.seconds:.3f}",
               f"ops {self.ops} ops_per_s {self.ops_per_s:.1f}",
               f"psyncs {self.psyncs} pages_copied_per_psync {self.pages_per_psync:.1f}",
               "psync_latency_us " + " ".join(f"{k} {v * 1e6:.1f}" for k, v in pct.items())]
        if self.list_length is not None:
            out.append(f"list_length {self.list_length}")
        return out


def run_workload(system: PmoSystem, workload: str, cfg: SyncConfig, duration: float,
                 pmo_size: int = DEFAULT_PMO_SIZE, seed: int = 0) -> BenchResult:
    if workload not in WORKLOADS:
        raise ConfigError(f"unknown workload {workload!r}; choose from {', '.join(WORKLOADS)}")
    name = f"bench-{workload}"
    ensure_pmo(system, name, pmo_size)
    h = system.attach(name, "w", BENCH_KEY)
    pages = h.pages
    lst = None
    if workload == "linkedlist":
        try:
            lst = PersistentList(h)
        except Exception:
            lst = PersistentList.format(h)
        system.psync(h)

    ops = [0] * cfg.threads
    copied, latencies = [], []
    clock = {"next": time.perf_counter() + cfg.delta, "stop": False}
    end = time.perf_counter() + duration
    list_lock = threading.Lock()

    def sync_point():
        t0 = time.perf_counter()
        before = system.stats.psync_page_copies
        system.psync(h)
        t1 = time.perf_counter()
        latencies.append(t1 - t0)
        copied.append(system.stats.psync_page_copies - before)
        clock["next"] = t1 + cfg.delta
        clock["stop"] = t1 >= end

    barrier = threading.Barrier(cfg.threads, action=sync_point)

    def worker(tid):
        rng = np.random.default_rng(seed + tid)
        line = np.full(64, tid + 1, np.uint8)
        # each worker owns an interleaved slice of the pages
        mine = np.arange(tid, pages, cfg.threads)
        i = 0
        while True:
            if workload == "seqwrite":
                page = int(mine[i % mine.size])
                h.write(page * PAGE_SIZE, line)
            elif workload == "randwrite":
                page = int(mine[rng.integers(mine.size)])
                h.write(page * PAGE_SIZE + 64 * int(rng.integers(64)), line)
            else:
                with list_lock:
                    lst.insert(int(rng.integers(1 << 40)))
            i += 1
            ops[tid] += 1
            if time.perf_counter() >= clock["next"]:
                barrier.wait()
                if clock["stop"]:
                    return

    start = time.perf_counter()
    threads = [threading.Thread(target=worker, args=(t,)) for t in range(cfg.threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - start
    length = len(lst) if lst is not None else None
    system.detach(h)
    return BenchResult(workload, cfg.threads, sum(ops), elapsed, len(latencies),
                       copied, latencies, length)


def measure_psync_latency(system: PmoSystem, name: str, dirty_pages: int, reps: int = 5,
                          key=BENCH_KEY) -> tuple[list[float], list[int]]:
    """Time ``reps`` psyncs, each after dirtying the first ``dirty_pages`` pages."""
    h = system.attach(name, "w", key)
    try:
        block = np.full(dirty_pages * PAGE_SIZE, 0x5A, np.uint8)
        h.write(0, block)
        system.psync(h)  # fault everything in first so only the sync is timed
        lat, counts = [], []
        for r in range(reps):
            block[::PAGE_SIZE] = r
            h.write(0, block)
            before = system.stats.psync_page_copies
            t0 = time.perf_counter()
            system.psync(h)
            lat.append(time.perf_counter() - t0)
            counts.append(system.stats.psync_page_copies - before)
        return lat, counts
    finally:
        system.detach(h)


def stage_copy_state(system: PmoSystem, name: str, dirty_pages: int, key=BENCH_KEY) -> None:
    """Leave ``name`` durably in state C with ``dirty_pages`` DIRTY pages, as a crash would.

    The handle is abandoned without detaching; the next mount sees a stale writer.
    """
    h = system.attach(name, "w", key)
    h.write(0, np.full(dirty_pages * PAGE_SIZE, 0xC3, np.uint8))
    system._persist_stages(h)
    system.dev.fence()


def time_recovery(path, pmo_size: int, reps: int = 3, sync: bool = True) -> tuple[list[float], list[int]]:
    """Wall time and page copies of C-state recovery of a fully dirty PMO of ``pmo_size``."""
    times, copies = [], []
    dev = MappedDevice.create(path, device_size_for(pmo_size), sync=sync)
    try:
        format_device(dev, "recovery", 4)
        PmoSystem.open(dev).pcreate("victim", pmo_size, BENCH_KEY)
        pages = -(-pmo_size // PAGE_SIZE)
        for _ in range(reps):
            stage_copy_state(PmoSystem.open(dev, pid=1), "victim", pages)
            system = PmoSystem.open(dev, pid=2)
            t0 = time.perf_counter()
            reports = system.recover_all()
            times.append(time.perf_counter() - t0)
            copies.append(sum(r.pages for r in reports))
    finally:
        dev.close()
    return times, copies

