"""Persistence-domain backends.

Two devices share one interface:

* :class:`PersistenceModel` simulates the volatile cache, the write-pending
  queue and the durable media line by line, logs every protocol event and can
  enumerate the images a power failure could leave behind.
* :class:`MappedDevice` runs the same calls against a real memory-mapped file;
  flushes are recorded per page span and a fence turns them into ``msync``.

Crash semantics of the simulation: lines that were stored but never flushed
are always lost; lines flushed since the last fence survive or vanish
independently of each other; a fence makes every flushed line durable;
uncached atomic writes are durable the moment they are issued.
"""

from __future__ import annotations

import enum
import itertools
import mmap
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels
from .errors import DomainError, RangeError

LINE_SIZE = 64
PAGE_SIZE = 4096
WORD_SIZE = 8


@dataclass(frozen=True, order=True)
class LineAddr:
    offset: int

    def __post_init__(self):
        if self.offset < 0 or self.offset % LINE_SIZE:
            raise RangeError(f"line address {self.offset:#x} is not {LINE_SIZE}-byte aligned")


class EventKind(enum.Enum):
    STORE = "store"
    FLUSH = "flush"
    FENCE = "fence"
    UNCACHED = "uncached"


@dataclass(frozen=True)
class ProtocolEvent:
    kind: EventKind
    addr: int
    len: int
    seq: int
    data: bytes | None = None


@dataclass
class CrashImage:
    media_snapshot: np.ndarray
    crash_seq: int
    survivor_set: frozenset

    def tobytes(self) -> bytes:
        return self.media_snapshot.tobytes()


def lines_spanning(offset: int, length: int) -> range:
    """Offsets of every cache line touched by ``[offset, offset + length)``."""
    if length <= 0:
        return range(0)
    first = offset - offset % LINE_SIZE
    return range(first, offset + length, LINE_SIZE)


def _as_u8(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.reshape(-1).view(np.uint8)
    return np.frombuffer(bytes(data), dtype=np.uint8)


class Device:
    """Common surface of the simulated and the mapped backend."""

    simulated = False

    def __init__(self, size: int):
        if size <= 0 or size % PAGE_SIZE:
            raise RangeError(f"device size {size} must be a positive multiple of {PAGE_SIZE}")
        self.size = size
        self._uncached: list[tuple[int, int]] = []
        self._uncached_lines = np.empty(0, dtype=np.int64)
        self.stats = {"stores": 0, "flushes": 0, "fences": 0, "uncached_writes": 0}

    # -- uncached ranges ---------------------------------------------------
    @property
    def uncached_ranges(self) -> list[tuple[int, int]]:
        return list(self._uncached)

    def set_uncached_ranges(self, ranges: Iterable[tuple[int, int]]) -> None:
        """Declare byte ranges ``(offset, length)`` whose lines bypass the cache.

        Ranges are widened to whole cache lines.
        """
        ranges = sorted((int(o), int(n)) for o, n in ranges)
        lines = set()
        for off, n in ranges:
            self._check_bounds(off, n)
            lines.update(lines_spanning(off, n))
        self._check_no_cached_lines(lines)
        self._uncached = ranges
        self._uncached_lines = np.array(sorted(lines), dtype=np.int64)

    def _check_no_cached_lines(self, lines) -> None:
        pass

    def _touches_uncached(self, offset: int, length: int) -> bool:
        arr = self._uncached_lines
        if arr.size == 0 or length <= 0:
            return False
        first = offset - offset % LINE_SIZE
        i = int(np.searchsorted(arr, first))
        return i < arr.size and arr[i] < offset + length

    def _in_uncached(self, offset: int, length: int) -> bool:
        return any(o <= offset and offset + length <= o + n for o, n in self._uncached)

    # -- validation --------------------------------------------------------
    def _check_bounds(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise RangeError(f"range [{offset:#x}, {offset + length:#x}) outside device of {self.size} bytes")

    def _check_store(self, offset: int, length: int) -> None:
        self._check_bounds(offset, length)
        if self._touches_uncached(offset, length):
            raise DomainError(f"store to [{offset:#x}, {offset + length:#x}) overlaps an uncached range")

    def _check_line(self, line) -> int:
        off = line.offset if isinstance(line, LineAddr) else int(line)
        if off % LINE_SIZE:
            raise RangeError(f"line address {off:#x} is not {LINE_SIZE}-byte aligned")
        self._check_bounds(off, LINE_SIZE)
        return off

    def _check_word(self, offset: int) -> None:
        if offset % WORD_SIZE:
            raise RangeError(f"uncached word at {offset:#x} is not 8-byte aligned")
        self._check_bounds(offset, WORD_SIZE)
        if not self._in_uncached(offset, WORD_SIZE):
            raise DomainError(f"uncached write at {offset:#x} outside every uncached range")

    # -- derived helpers ---------------------------------------------------
    def flush_range(self, offset: int, length: int) -> None:
        for line in lines_spanning(offset, length):
            self.flush_line(line)

    def persist(self, offset: int, data) -> None:
        """Store and flush, without fencing."""
        data = _as_u8(data)
        self.store(offset, data)
        self.flush_range(offset, data.size)

    def copy_flush(self, dst: int, src: int, length: int) -> None:
        """Copy ``length`` bytes from ``src`` to ``dst`` and flush the destination lines."""
        self.persist(dst, self.read_volatile(src, length))

    def read_u64(self, offset: int) -> int:
        return int.from_bytes(self.read_volatile(offset, 8).tobytes(), "little")

    def checkpoint(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.read_durable(0, self.size).tobytes())


class PersistenceModel(Device):
    """Simulated persistence domain over an in-memory media array."""

    simulated = True

    def __init__(self, size: int | None = None, image=None, log_events: bool = True):
        if image is not None:
            media = np.array(_as_u8(image), dtype=np.uint8, copy=True)
            size = media.size
        else:
            media = np.zeros(size, dtype=np.uint8)
        super().__init__(size)
        self.media = media
        self.cache: dict[int, np.ndarray] = {}
        self.pending: dict[int, np.ndarray] = {}
        self.event_log: list[ProtocolEvent] = []
        self.log_events = log_events
        self._baseline = media.copy() if log_events else None

    @classmethod
    def from_file(cls, path, **kw) -> "PersistenceModel":
        with open(path, "rb") as fh:
            return cls(image=fh.read(), **kw)

    @property
    def seq(self) -> int:
        return len(self.event_log)

    def _log(self, kind, addr, length=0, data=None):
        if self.log_events:
            self.event_log.append(ProtocolEvent(kind, addr, length, len(self.event_log), data))

    def _check_no_cached_lines(self, lines) -> None:
        if any(line in self.cache or line in self.pending for line in lines):
            raise DomainError("uncached range overlaps lines that are cached or pending")

    def reset_log(self) -> None:
        """Make the current media the replay baseline; requires a quiescent device."""
        if self.cache or self.pending:
            raise DomainError("reset_log needs empty cache and pending sets")
        self.event_log = []
        self._baseline = self.media.copy()

    # -- protocol events ---------------------------------------------------
    def store(self, offset: int, data) -> None:
        data = _as_u8(data)
        n = data.size
        self._check_store(offset, n)
        for line in lines_spanning(offset, n):
            cur = self.cache.get(line)
            if cur is None:
                src = self.pending.get(line)
                cur = src.copy() if src is not None else self.media[line:line + LINE_SIZE].copy()
                self.cache[line] = cur
            lo = max(offset, line)
            hi = min(offset + n, line + LINE_SIZE)
            cur[lo - line:hi - line] = data[lo - offset:hi - offset]
        self.stats["stores"] += 1
        self._log(EventKind.STORE, offset, n, data.tobytes() if self.log_events else None)

    def flush_line(self, line) -> None:
        off = self._check_line(line)
        cur = self.cache.pop(off, None)
        if cur is not None:
            self.pending[off] = cur
        self.stats["flushes"] += 1
        self._log(EventKind.FLUSH, off)

    def fence(self) -> None:
        for off, contents in self.pending.items():
            self.media[off:off + LINE_SIZE] = contents
        self.pending.clear()
        self.stats["fences"] += 1
        self._log(EventKind.FENCE, 0)

    def uncached_atomic_write(self, offset: int, word: int) -> None:
        self._check_word(offset)
        raw = int(word).to_bytes(WORD_SIZE, "little")
        self.media[offset:offset + WORD_SIZE] = np.frombuffer(raw, dtype=np.uint8)
        self.stats["uncached_writes"] += 1
        self._log(EventKind.UNCACHED, offset, WORD_SIZE, raw)

    # -- reads ---------------------------------------------------------------
    def read_durable(self, offset: int, length: int) -> np.ndarray:
        self._check_bounds(offset, length)
        return self.media[offset:offset + length].copy()

    def read_volatile(self, offset: int, length: int) -> np.ndarray:
        self._check_bounds(offset, length)
        out = self.media[offset:offset + length].copy()
        if not self.pending and not self.cache:
            return out
        first = offset - offset % LINE_SIZE
        end = offset + length
        nlines = (end - first + LINE_SIZE - 1) // LINE_SIZE
        for layer in (self.pending, self.cache):
            if not layer:
                continue
            if len(layer) < nlines:
                keys = [k for k in layer if first <= k < end]
            else:
                keys = [k for k in range(first, end, LINE_SIZE) if k in layer]
            for line in keys:
                lo = max(offset, line)
                hi = min(end, line + LINE_SIZE)
                out[lo - offset:hi - offset] = layer[line][lo - line:hi - line]
        return out

    # -- crash enumeration ---------------------------------------------------
    def replica(self) -> "PersistenceModel":
        """Fresh non-logging model at the replay baseline with the same uncached ranges."""
        if self._baseline is None:
            raise DomainError("model was created without event logging")
        twin = PersistenceModel(image=self._baseline, log_events=False)
        twin._uncached = list(self._uncached)
        twin._uncached_lines = self._uncached_lines.copy()
        return twin

    def apply_event(self, ev: ProtocolEvent) -> None:
        if ev.kind is EventKind.STORE:
            self.store(ev.addr, ev.data)
        elif ev.kind is EventKind.FLUSH:
            self.flush_line(ev.addr)
        elif ev.kind is EventKind.FENCE:
            self.fence()
        else:
            self.uncached_atomic_write(ev.addr, int.from_bytes(ev.data, "little"))

    def iter_states(self, upto: int | None = None) -> Iterator[tuple[int, "PersistenceModel"]]:
        """Yield ``(k, replica)`` with the first ``k`` events applied, for k = 0..upto.

        The same replica object is advanced in place between yields.
        """
        upto = self.seq if upto is None else upto
        twin = self.replica()
        yield 0, twin
        for k, ev in enumerate(self.event_log[:upto], start=1):
            twin.apply_event(ev)
            yield k, twin

    def state_at(self, at_seq: int) -> "PersistenceModel":
        if not 0 <= at_seq <= self.seq:
            raise RangeError(f"crash point {at_seq} outside [0, {self.seq}]")
        for k, twin in self.iter_states(at_seq):
            if k == at_seq:
                return twin
        raise AssertionError("unreachable")

    def crash_lines(self, distinct_only: bool = False) -> list[int]:
        """Pending lines, optionally only those whose survival changes the image."""
        lines = sorted(self.pending)
        if distinct_only:
            lines = [l for l in lines
                     if not np.array_equal(self.pending[l], self.media[l:l + LINE_SIZE])]
        return lines

    def crash_image(self, survivors: Iterable[int], crash_seq: int | None = None) -> CrashImage:
        survivors = frozenset(survivors)
        stray = survivors - self.pending.keys()
        if stray:
            raise DomainError(f"survivor lines {sorted(stray)} are not pending")
        image = self.media.copy()
        if survivors:
            offs = np.array(sorted(survivors), dtype=np.int64)
            data = np.stack([self.pending[o] for o in offs])
            _kernels.apply_lines(image, offs, data)
        return CrashImage(image, self.seq if crash_seq is None else crash_seq, survivors)

    def enumerate_crash_images(self, at_seq: int | None = None, budget: int = 4096,
                               seed: int = 0, distinct_only: bool = False) -> list[CrashImage]:
        at_seq = self.seq if at_seq is None else at_seq
        state = self.state_at(at_seq)
        lines = state.crash_lines(distinct_only)
        return [state.crash_image(s, at_seq) for s in survivor_subsets(lines, budget, seed)]


def enumerate_crash_images(model: PersistenceModel, at_seq: int, budget: int,
                           seed: int = 0) -> list[CrashImage]:
    return model.enumerate_crash_images(at_seq, budget, seed)


def survivor_subsets(lines: Sequence[int], budget: int, seed: int = 0) -> list[frozenset]:
    """All subsets of ``lines`` if there are at most ``budget``; else a seeded sample.

    The sample has exactly ``budget`` distinct subsets and always contains the
    empty and the full subset.
    """
    lines = list(lines)
    n = len(lines)
    if budget < 1:
        raise DomainError("budget must be at least 1")
    if n < 63 and (1 << n) <= budget:
        return [frozenset(itertools.compress(lines, ((m >> i) & 1 for i in range(n))))
                for m in range(1 << n)]
    if budget == 1:
        return [frozenset()]
    rng = np.random.default_rng(seed)
    picked = {frozenset(), frozenset(lines)}
    out = [frozenset(), frozenset(lines)]
    while len(out) < budget:
        mask = rng.integers(0, 2, size=n).astype(bool)
        s = frozenset(itertools.compress(lines, mask))
        if s not in picked:
            picked.add(s)
            out.append(s)
    return out


class MappedDevice(Device):
    """Pass-through backend over a memory-mapped file (or anonymous memory).

    Flushed page spans are collected and ``msync``-ed at the next fence;
    uncached writes are synced immediately.  Crashes cannot be enumerated.
    """

    def __init__(self, path=None, size: int | None = None, sync: bool = True):
        if path is None:
            if size is None:
                raise RangeError("anonymous mapping needs a size")
            self._fd = None
            self._mm = mmap.mmap(-1, size)
            sync = False
        else:
            self._fd = os.open(path, os.O_RDWR)
            actual = os.fstat(self._fd).st_size
            size = actual if size is None else size
            if actual != size:
                raise RangeError(f"{path}: file is {actual} bytes, expected {size}")
            self._mm = mmap.mmap(self._fd, size)
        super().__init__(size)
        self.path = path
        self.sync = sync
        self.view = np.frombuffer(self._mm, dtype=np.uint8)
        self._spans: list[tuple[int, int]] = []

    @classmethod
    def create(cls, path, size: int, sync: bool = True) -> "MappedDevice":
        with open(path, "wb") as fh:
            fh.truncate(size)
        return cls(path, size, sync=sync)

    def close(self) -> None:
        if self._mm is None:
            return
        self.fence()
        self.view = None
        self._mm.close()
        self._mm = None
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def store(self, offset: int, data) -> None:
        data = _as_u8(data)
        self._check_store(offset, data.size)
        self.view[offset:offset + data.size] = data
        self.stats["stores"] += 1

    def _note_span(self, offset: int, length: int) -> None:
        lo = offset - offset % PAGE_SIZE
        hi = -(-(offset + length) // PAGE_SIZE) * PAGE_SIZE
        spans = self._spans
        if spans and spans[-1][0] <= lo <= spans[-1][1]:
            spans[-1] = (spans[-1][0], max(spans[-1][1], hi))
        else:
            spans.append((lo, hi))

    def flush_line(self, line) -> None:
        off = self._check_line(line)
        self._note_span(off, LINE_SIZE)
        self.stats["flushes"] += 1

    def flush_range(self, offset: int, length: int) -> None:
        if length <= 0:
            return
        self._check_bounds(offset, length)
        self._note_span(offset, length)
        self.stats["flushes"] += len(lines_spanning(offset, length))

    def copy_flush(self, dst: int, src: int, length: int) -> None:
        self._check_store(dst, length)
        self._check_bounds(src, length)
        self.view[dst:dst + length] = self.view[src:src + length]
        self.stats["stores"] += 1
        self.flush_range(dst, length)

    def fence(self) -> None:
        if self.sync and self._spans:
            merged = []
            for lo, hi in sorted(self._spans):
                if merged and lo <= merged[-1][1]:
                    merged[-1][1] = max(merged[-1][1], hi)
                else:
                    merged.append([lo, hi])
            for lo, hi in merged:
                self._mm.flush(lo, hi - lo)
        self._spans.clear()
        self.stats["fences"] += 1

    def uncached_atomic_write(self, offset: int, word: int) -> None:
        self._check_word(offset)
        self.view[offset:offset + WORD_SIZE].view(np.uint64)[0] = np.uint64(word)
        if self.sync:
            page = offset - offset % PAGE_SIZE
            self._mm.flush(page, PAGE_SIZE)
        self.stats["uncached_writes"] += 1

    def read_volatile(self, offset: int, length: int) -> np.ndarray:
        self._check_bounds(offset, length)
        return self.view[offset:offset + length].copy()

    read_durable = read_volatile
