"""PMO lifecycle: pcreate, attach, detach, psync, pdestroy and recovery.

Writes of a write-attached PMO go to a shadow copy, page by page: the first
write to a page copies the primary page into the shadow and marks it PRESENT
in the persistent page-state bitmap; every write marks the page DIRTY.
``psync`` walks the entry through W -> P -> C -> W with uncached atomic
writes, persisting the dirty shadow pages before entering C and copying them
to the primary while in C.  After a crash the state word alone decides which
copy is consistent.
"""

from __future__ import annotations

import enum
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (AlreadyExistsError, BusyError, CapacityError, ConfigError, DomainError,
                     NotFoundError, PermissionError, RangeError, UndefinedBehaviorError)
from .layout import (E_BOOT, E_PID, E_READERS, E_SHADOW, STATE_C, STATE_D, STATE_NAMES,
                     STATE_P, STATE_R, STATE_W, MetadataEntry, Volume, _zero_durable,
                     open_system)
from .pmem import LINE_SIZE, PAGE_SIZE, Device

DEFAULT_PERSISTENT_BASE = 1 << 46

# protocol mutants, used only to prove the crash harness catches them
MUTANTS = {
    "drop-fence-2": "skip the fence that ends the persist stage",
    "drop-fence-4": "skip the fence after copying shadow pages to the primary",
    "early-state-c": "enter state C before the dirty pages and bits are flushed",
    "copy-before-c": "copy shadow pages to the primary while still in state P",
    "skip-dirty-persist": "never flush the DIRTY bits of the page-state bitmap",
}


class Permission(enum.Enum):
    READ = "r"
    WRITE = "w"

    @classmethod
    def parse(cls, perm) -> "Permission":
        if isinstance(perm, cls):
            return perm
        p = str(perm).lower()
        if p in ("r", "read", "ro"):
            return cls.READ
        if p in ("w", "rw", "write"):
            return cls.WRITE
        raise DomainError(f"unknown permission {perm!r}")


def key_value(key) -> int:
    """Keys are 8-byte comparands: ints, or text/bytes of at most 8 bytes."""
    if isinstance(key, int):
        if not 0 <= key < 1 << 64:
            raise DomainError("key must fit in 8 bytes")
        return key
    raw = key.encode("utf-8") if isinstance(key, str) else bytes(key)
    if len(raw) > 8:
        raise DomainError("key must fit in 8 bytes")
    return int.from_bytes(raw.ljust(8, b"\0"), "little")


@dataclass(frozen=True)
class AddressPolicy:
    """Static virtual addresses: a PMO at data page ``y`` lives at ``base + data_offset + y*4096``."""

    persistent_base: int = DEFAULT_PERSISTENT_BASE

    def reservation(self, vol: Volume) -> range:
        return range(self.persistent_base + vol.data_offset,
                     self.persistent_base + vol.header.total_size)

    def base_address(self, vol: Volume, entry: MetadataEntry) -> int:
        return self.persistent_base + vol.data_offset + entry.primary_offset * PAGE_SIZE


@dataclass(frozen=True)
class SyncConfig:
    delta: float
    threads: int = 1

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")


@dataclass
class RecoveryReport:
    name: str
    state: str
    action: str
    pages: int = 0

    def __str__(self):
        tail = f" {self.pages} pages" if self.action == "copy-shadow-to-primary" else ""
        return f"recover {self.name} state {self.state} action {self.action}{tail}"


@dataclass
class PsyncRecord:
    name: str
    slot: int
    pages: int
    start_seq: int | None
    end_seq: int | None


class PmoHandle:
    """A live attachment of one PMO to one session (pid)."""

    def __init__(self, system, entry: MetadataEntry, permission: Permission,
                 base_address: int, pid: int):
        self.system = system
        self.name = entry.name
        self.slot = entry.slot
        self.size = entry.size
        self.primary_offset = entry.primary_offset
        self.shadow_offset = entry.shadow_offset
        self.permission = permission
        self.base_address = base_address
        self.pid = pid
        self.dirty_pages: set[int] = set()
        self.faulted_pages: set[int] = set()
        self.attached = True
        self._write_epoch = 0
        self._in_psync = False
        self._lock = threading.Lock()

    def __repr__(self):
        return (f"<PmoHandle {self.name} {self.permission.value} @{self.base_address:#x} "
                f"{'attached' if self.attached else 'detached'}>")

    @property
    def pages(self) -> int:
        return self.size // PAGE_SIZE

    def addr(self, offset: int) -> int:
        return self.base_address + offset

    def offset_of(self, addr: int) -> int:
        off = addr - self.base_address
        if not 0 <= off < self.size:
            raise RangeError(f"address {addr:#x} outside PMO {self.name}")
        return off

    def read(self, offset: int, length: int) -> bytes:
        return self.system.pmo_read(self, offset, length)

    def write(self, offset: int, data) -> None:
        self.system.pmo_write(self, offset, data)

    def load_u64(self, addr: int) -> int:
        return int.from_bytes(self.read(self.offset_of(addr), 8), "little")

    def store_u64(self, addr: int, value: int) -> None:
        self.write(self.offset_of(addr), int(value).to_bytes(8, "little"))

    def psync(self) -> None:
        self.system.psync(self)

    def detach(self) -> None:
        self.system.detach(self)


@dataclass
class Stats:
    psyncs: int = 0
    psync_page_copies: int = 0
    recovery_page_copies: int = 0
    faults: int = 0
    psync_log: list = field(default_factory=list)


class PmoSystem:
    """Programming interface over a mounted volume.

    ``pid`` is the default session identity for attach; tests and the crash
    harness pass explicit pids to play several processes.  A writer signature
    is live when it carries the current boot id and its pid still holds a
    handle in this system (or ``pid_alive`` says so).
    """

    def __init__(self, volume: Volume, *, policy: AddressPolicy | None = None,
                 checked: bool = True, pid: int | None = None, pid_alive=None,
                 mutations=()):
        unknown = set(mutations) - MUTANTS.keys()
        if unknown:
            raise ConfigError(f"unknown mutants: {sorted(unknown)}")
        self.vol = volume
        self.dev: Device = volume.dev
        self.policy = policy or AddressPolicy()
        self.checked = checked
        self.pid = os.getpid() if pid is None else pid
        self.mutations = frozenset(mutations)
        self._pid_alive = pid_alive
        self._handles: dict[int, list[PmoHandle]] = {}
        self._lock = volume.lock
        self.stats = Stats()

    @classmethod
    def open(cls, dev: Device, **kw) -> "PmoSystem":
        return cls(open_system(dev), **kw)

    # -- helpers ---------------------------------------------------------------
    def _entry(self, name) -> MetadataEntry:
        e = self.vol.lookup_entry(name)
        if e is None:
            raise NotFoundError(f"no PMO named {name!r}")
        return e

    def _register(self, h: PmoHandle) -> None:
        self._handles.setdefault(h.pid, []).append(h)

    def _unregister(self, h: PmoHandle) -> None:
        hs = self._handles.get(h.pid, [])
        if h in hs:
            hs.remove(h)
        if not hs:
            self._handles.pop(h.pid, None)

    def pid_alive(self, pid: int) -> bool:
        if pid in self._handles:
            return True
        return bool(self._pid_alive and self._pid_alive(pid))

    def writer_alive(self, e: MetadataEntry) -> bool:
        return (e.attached_pid != 0 and e.attach_boot_id == self.vol.boot_id
                and self.pid_alive(e.attached_pid))

    def _needs_recovery(self, e: MetadataEntry) -> bool:
        if e.state in (STATE_W, STATE_P, STATE_C):
            return not self.writer_alive(e)
        if e.state == STATE_R:
            return e.attach_boot_id < self.vol.boot_id
        return bool(e.shadow_offset or e.attached_pid or e.attach_boot_id)

    def _resolve(self, target) -> PmoHandle:
        if isinstance(target, PmoHandle):
            return target
        for hs in self._handles.values():
            for h in hs:
                if h.base_address <= target < h.base_address + h.size:
                    return h
        raise UndefinedBehaviorError(f"address {target:#x} is not attached")

    def _bitmap_addr(self, h) -> int:
        return self.vol.page_addr(h.shadow_offset - _kernels.bitmap_pages(h.pages))

    def _shadow_addr(self, h, page: int) -> int:
        return self.vol.page_addr(h.shadow_offset + page)

    def _primary_addr(self, h, page: int) -> int:
        return self.vol.page_addr(h.primary_offset + page)

    def base_address(self, name) -> int:
        return self.policy.base_address(self.vol, self._entry(name))

    # -- state transitions ---------------------------------------------------------
    def pcreate(self, name, size: int, key, *, writable: bool = True) -> MetadataEntry:
        """Create a detached PMO of ``size`` bytes (rounded up to whole pages).

        ``writable=False`` withholds the write key, giving a read-only PMO.
        """
        k = key_value(key)
        if k == 0:
            raise DomainError("key 0 is reserved")
        if size <= 0:
            raise DomainError("size must be positive")
        pages = -(-size // PAGE_SIZE)
        with self._lock:
            if self.vol.lookup_entry(name) is not None:
                raise AlreadyExistsError(f"PMO {name!r} already exists")
            if self.vol.allocated_count >= self.vol.max_pmos:
                raise CapacityError(f"metadata hashtable full ({self.vol.max_pmos} entries)")
            primary = self.vol.allocate_extent(pages)
            _zero_durable(self.dev, self.vol.page_addr(primary), pages * PAGE_SIZE)
            return self.vol.insert_entry(name, pages * PAGE_SIZE, primary, k,
                                         k if writable else 0)

    def attach(self, name, perm, key, *, pid: int | None = None) -> PmoHandle:
        perm = Permission.parse(perm)
        k = key_value(key)
        pid = self.pid if pid is None else pid
        with self._lock:
            e = self._entry(name)
            if perm is Permission.READ and k != e.read_key:
                raise PermissionError(f"key does not grant read access to {name!r}")
            if perm is Permission.WRITE and (e.write_key == 0 or k != e.write_key):
                raise PermissionError(f"key does not grant write access to {name!r}")
            if e.state in (STATE_W, STATE_P, STATE_C) and self.writer_alive(e):
                if perm is Permission.WRITE:
                    raise BusyError(f"{name!r} already has a writer (>1 writer)")
                raise BusyError(f"{name!r} is attached by a writer (existing writer)")
            if self._needs_recovery(e):
                self.recover(e)
                e = self.vol.read_entry(e.slot)
            if perm is Permission.READ:
                self.vol.write_field(e.slot, E_READERS, e.reader_count + 1)
                self.vol.write_field(e.slot, E_BOOT, self.vol.boot_id)
                if e.state != STATE_R:
                    self.vol.set_control(e.slot, STATE_R)
            else:
                if e.state == STATE_R:
                    raise BusyError(f"{name!r} has readers; read and write are mutually exclusive")
                bpages = _kernels.bitmap_pages(e.pages)
                start = self.vol.allocate_extent(bpages + e.pages)
                _zero_durable(self.dev, self.vol.page_addr(start), bpages * PAGE_SIZE)
                self.vol.write_field(e.slot, E_SHADOW, start + bpages)
                self.vol.write_field(e.slot, E_PID, pid)
                self.vol.write_field(e.slot, E_BOOT, self.vol.boot_id)
                self.vol.set_control(e.slot, STATE_W)
            e = self.vol.read_entry(e.slot)
            h = PmoHandle(self, e, perm, self.policy.base_address(self.vol, e), pid)
            self._register(h)
            return h

    def detach(self, target) -> None:
        try:
            h = self._resolve(target)
        except UndefinedBehaviorError:
            if self.checked:
                raise
            return
        if not h.attached:
            if self.checked:
                raise UndefinedBehaviorError(f"detach of {h.name!r}, which is not attached")
            return
        with self._lock:
            e = self.vol.read_entry(h.slot)
            if h.permission is Permission.READ:
                left = max(e.reader_count - 1, 0)
                self.vol.write_field(h.slot, E_READERS, left)
                if left == 0:
                    self.vol.set_control(h.slot, STATE_D)
                    self.vol.write_field(h.slot, E_BOOT, 0)
            else:
                # state D first: un-psynced shadow contents are discarded from here on
                self.vol.set_control(h.slot, STATE_D)
                self.vol.release_shadow(h.slot)
            h.attached = False
            h.faulted_pages.clear()
            h.dirty_pages.clear()
            self._unregister(h)

    def pdestroy(self, name, key) -> None:
        k = key_value(key)
        with self._lock:
            e = self._entry(name)
            if k != e.read_key:
                raise PermissionError(f"key does not match PMO {name!r}")
            if self._needs_recovery(e):
                self.recover(e)
                e = self.vol.read_entry(e.slot)
            if e.state != STATE_D:
                raise BusyError(f"{name!r} is attached (state {e.state_name})")
            self.vol.remove_entry(e.slot)

    # -- data path -------------------------------------------------------------
    def _check_handle(self, h: PmoHandle, offset: int, length: int) -> None:
        if not h.attached:
            raise UndefinedBehaviorError(f"access to detached PMO {h.name!r}")
        if offset < 0 or length < 0 or offset + length > h.size:
            raise RangeError(f"[{offset}, {offset + length}) outside PMO {h.name!r} of {h.size} bytes")

    def _bitmap_slice(self, h, first: int, last: int):
        b0, b1 = first >> 2, last >> 2
        addr = self._bitmap_addr(h) + b0
        return addr, self.dev.read_volatile(addr, b1 - b0 + 1), 4 * b0

    def pmo_read(self, h: PmoHandle, offset: int, length: int) -> bytes:
        self._check_handle(h, offset, length)
        if length == 0:
            return b""
        first, last = offset // PAGE_SIZE, (offset + length - 1) // PAGE_SIZE
        h.faulted_pages.update(range(first, last + 1))
        out = self.dev.read_volatile(self._primary_addr(h, 0) + offset, length)
        if h.permission is Permission.WRITE:
            _, bm, base = self._bitmap_slice(h, first, last)
            pages = np.arange(first, last + 1, dtype=np.int64)
            present = _kernels.test_pages(bm, pages - base, _kernels.PRESENT)
            if present.any():
                shadow = self.dev.read_volatile(self._shadow_addr(h, 0) + offset, length)
                rel = (np.arange(length) + offset) // PAGE_SIZE - first
                mask = present[rel]
                out[mask] = shadow[mask]
        return out.tobytes()

    def pmo_write(self, h: PmoHandle, offset: int, data) -> None:
        data = np.frombuffer(bytes(data), np.uint8) if not isinstance(data, np.ndarray) else data
        self._check_handle(h, offset, data.size)
        if h.permission is not Permission.WRITE:
            raise PermissionError(f"PMO {h.name!r} is attached read-only")
        if h._in_psync and self.checked:
            raise UndefinedBehaviorError(f"write to {h.name!r} while psync is in flight")
        if data.size == 0:
            return
        with h._lock:
            h._write_epoch += 1
            first, last = offset // PAGE_SIZE, (offset + data.size - 1) // PAGE_SIZE
            pages = np.arange(first, last + 1, dtype=np.int64)
            baddr, bm, base = self._bitmap_slice(h, first, last)
            local = pages - base
            missing = pages[~_kernels.test_pages(bm, local, _kernels.PRESENT)]
            if missing.size:
                # fault in: the shadow page starts as a durable copy of the primary page
                starts, lengths = _kernels.page_runs(missing)
                for s, n in zip(starts.tolist(), lengths.tolist()):
                    self.dev.copy_flush(self._shadow_addr(h, s), self._primary_addr(h, s), n * PAGE_SIZE)
                _kernels.set_bits(bm, missing - base, _kernels.PRESENT)
                self.dev.persist(baddr, bm)
                self.dev.fence()
                self.stats.faults += int(missing.size)
            self.dev.store(self._shadow_addr(h, 0) + offset, data)
            if not _kernels.test_pages(bm, local, _kernels.DIRTY).all():
                _kernels.set_bits(bm, local, _kernels.DIRTY)
                self.dev.store(baddr, bm)
            rng = range(first, last + 1)
            h.faulted_pages.update(rng)
            h.dirty_pages.update(rng)

    # -- psync -----------------------------------------------------------------
    def psync(self, target) -> None:
        h = self._resolve(target)
        if not h.attached:
            if self.checked:
                raise UndefinedBehaviorError(f"psync of {h.name!r}, which is not attached")
            return
        if h.permission is Permission.READ:
            return
        if h._in_psync and self.checked:
            raise UndefinedBehaviorError(f"concurrent psync of {h.name!r}")
        h._in_psync = True
        epoch = h._write_epoch
        try:
            start_seq = getattr(self.dev, "seq", None)
            copied = self._psync_protocol(h)
            end_seq = getattr(self.dev, "seq", None)
        finally:
            h._in_psync = False
        if self.checked and h._write_epoch != epoch:
            raise UndefinedBehaviorError(f"PMO {h.name!r} was written during psync")
        h.dirty_pages.clear()
        self.stats.psyncs += 1
        self.stats.psync_page_copies += copied
        self.stats.psync_log.append(PsyncRecord(h.name, h.slot, copied, start_seq, end_seq))

    def _copy_runs(self, h, starts, lengths) -> None:
        for s, n in zip(starts.tolist(), lengths.tolist()):
            self.dev.copy_flush(self._primary_addr(h, s), self._shadow_addr(h, s), n * PAGE_SIZE)

    def _persist_stages(self, h: PmoHandle):
        """Stages W -> P, persist, P -> C.  Returns the dirty pages and their runs."""
        mut = self.mutations
        dev, vol, slot = self.dev, self.vol, h.slot
        pages = np.array(sorted(h.dirty_pages), dtype=np.int64)
        starts, lengths = _kernels.page_runs(pages)
        baddr = self._bitmap_addr(h)

        vol.set_control(slot, STATE_P)
        if "early-state-c" in mut:
            vol.set_control(slot, STATE_C)
        # persist: dirty shadow lines and the bitmap lines holding their DIRTY bits
        for s, n in zip(starts.tolist(), lengths.tolist()):
            dev.flush_range(self._shadow_addr(h, s), n * PAGE_SIZE)
        if "skip-dirty-persist" not in mut:
            for line in sorted({(int(p) >> 2) // LINE_SIZE for p in pages}):
                dev.flush_line(baddr + line * LINE_SIZE)
        if "drop-fence-2" not in mut:
            dev.fence()
        if "copy-before-c" in mut:
            self._copy_runs(h, starts, lengths)
            dev.fence()
        if "early-state-c" not in mut:
            vol.set_control(slot, STATE_C)
        return pages, starts, lengths

    def _psync_protocol(self, h: PmoHandle) -> int:
        dev, baddr = self.dev, self._bitmap_addr(h)
        pages, starts, lengths = self._persist_stages(h)
        # copy: shadow -> primary, then retire the DIRTY bits
        if "copy-before-c" not in self.mutations:
            self._copy_runs(h, starts, lengths)
            if "drop-fence-4" not in self.mutations:
                dev.fence()
        if pages.size:
            lo, hi = int(pages[0]) >> 2, int(pages[-1]) >> 2
            bm = dev.read_volatile(baddr + lo, hi - lo + 1)
            _kernels.clear_bits(bm, pages - 4 * lo, _kernels.DIRTY)
            dev.persist(baddr + lo, bm)
            dev.fence()
        self.vol.set_control(h.slot, STATE_W)
        return int(pages.size)

    # -- recovery --------------------------------------------------------------
    def recover(self, entry) -> RecoveryReport:
        """Bring one entry back to a consistent detached state.

        Idempotent: a crash at any point of recovery leaves an image on which
        running it again produces the same final media.
        """
        with self._lock:
            if isinstance(entry, MetadataEntry):
                e = self.vol.read_entry(entry.slot)
            else:
                e = self._entry(entry)
            state = STATE_NAMES.get(e.state, "?")
            if e.state in (STATE_D, STATE_R):
                if e.reader_count:
                    self.vol.write_field(e.slot, E_READERS, 0)
                if e.state == STATE_R:
                    self.vol.set_control(e.slot, STATE_D)
                self.vol.release_shadow(e.slot)
                if self.vol.read_entry(e.slot).attach_boot_id:
                    self.vol.write_field(e.slot, E_BOOT, 0)
                return RecoveryReport(e.name, state, "none")
            if e.state in (STATE_W, STATE_P):
                self.vol.set_control(e.slot, STATE_D)
                self.vol.release_shadow(e.slot)
                return RecoveryReport(e.name, state, "discard-shadow")
            if e.state != STATE_C:
                raise DomainError(f"entry {e.name!r} has invalid state byte {e.state:#x}")
            bpages = e.bitmap_pages
            baddr = self.vol.page_addr(e.shadow_offset - bpages)
            bm = self.dev.read_volatile(baddr, _kernels.bitmap_bytes(e.pages))
            dirty = _kernels.pages_with_bit(bm, e.pages, _kernels.DIRTY)
            starts, lengths = _kernels.page_runs(dirty)
            for s, n in zip(starts.tolist(), lengths.tolist()):
                self.dev.copy_flush(self.vol.page_addr(e.primary_offset + s),
                                    self.vol.page_addr(e.shadow_offset + s), n * PAGE_SIZE)
            self.dev.fence()
            self.vol.set_control(e.slot, STATE_D)
            self.vol.release_shadow(e.slot)
            self.stats.recovery_page_copies += int(dirty.size)
            return RecoveryReport(e.name, state, "copy-shadow-to-primary", int(dirty.size))

    def recover_all(self) -> list[RecoveryReport]:
        return [self.recover(e) for e in self.vol.live_entries()]

    # -- introspection -----------------------------------------------------------
    def read_primary(self, name) -> bytes:
        """Durable primary contents of a PMO, bypassing attach."""
        e = self._entry(name)
        return self.dev.read_durable(self.vol.page_addr(e.primary_offset), e.size).tobytes()

    def handles(self) -> list[PmoHandle]:
        return [h for hs in self._handles.values() for h in hs]
