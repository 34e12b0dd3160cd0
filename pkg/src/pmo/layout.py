"""On-media format of a PMO system.

The device is split into three page-aligned regions::

    [0, 4096)                      header (one page, uncached)
    [4096, data_offset)            metadata: 64-byte count line + hashtable
    [data_offset, total_size)      data region: PMO primaries, shadows, free list

All integers are little-endian.  Header fields sit at fixed offsets (see
``HEADER_FIELDS``); the rest of the header page is reserved and zero.

Every metadata entry is 256 bytes.  Its first cache line is uncached and only
ever changed by 8-byte atomic writes; the remaining lines are cached and
written once, when the entry is created::

    0x00  control   byte 0 = state (one-hot D/R/W/P/C), byte 1 = slot status
    0x08  shadow    shadow data page offset (0 = no shadow)
    0x10  pid       attached writer pid
    0x18  boot      boot id recorded at attach
    0x20  readers   reader count
    0x40  name      48 bytes, zero padded
    0x70  size      bytes, page multiple
    0x78  primary   page offset of the primary copy
    0x80  read_key
    0x88  write_key

A shadow extent is ``bitmap_pages(n)`` pages of page-state bitmap followed by
``n`` data pages; the entry records the page offset of the first data page,
which is therefore never 0.

Free extents form an address-ordered singly linked list whose nodes live in
the first line of each free extent: ``magic, next (absolute byte offset), pages``.
"""

from __future__ import annotations

import re
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (AlreadyExistsError, CapacityError, DomainError, FormatError, NotFormattedError,
                     OutOfSpaceError, RangeError)
from .pmem import LINE_SIZE, PAGE_SIZE, Device

MAGIC = b"PMOSYS01"
METADATA_OFFSET = PAGE_SIZE
COUNT_LINE = LINE_SIZE
ENTRY_SIZE = 256
NAME_MAX = 47
SYSTEM_NAME_MAX = 63
FREE_MAGIC = int.from_bytes(b"PMOFREE\x00", "little")

HEADER_FIELDS = {
    "magic": 0x00,
    "system_name": 0x08,
    "total_size": 0x48,
    "metadata_offset": 0x50,
    "data_offset": 0x58,
    "next_free": 0x60,
    "boot_id": 0x68,
    "free_list_head": 0x70,
    "max_pmos": 0x78,
}
HEADER_USED = 0x80

# entry field offsets
E_CONTROL, E_SHADOW, E_PID, E_BOOT, E_READERS = 0x00, 0x08, 0x10, 0x18, 0x20
E_NAME, E_SIZE, E_PRIMARY, E_RKEY, E_WKEY = 0x40, 0x70, 0x78, 0x80, 0x88
_BODY = struct.Struct("<48sQQQQ")

STATE_D, STATE_R, STATE_W, STATE_P, STATE_C = 0x01, 0x02, 0x04, 0x08, 0x10
STATE_NAMES = {STATE_D: "D", STATE_R: "R", STATE_W: "W", STATE_P: "P", STATE_C: "C"}
STATE_BY_NAME = {v: k for k, v in STATE_NAMES.items()}

SLOT_EMPTY, SLOT_LIVE, SLOT_TOMBSTONE, SLOT_DESTROYING = 0, 1, 2, 3

_NAME_RE = re.compile(rb"^[\x21-\x7e\x80-\xff]+$")


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def encode_name(name, limit: int = NAME_MAX) -> bytes:
    raw = name.encode("utf-8") if isinstance(name, str) else bytes(name)
    if not raw or len(raw) > limit or not _NAME_RE.match(raw):
        raise DomainError(f"name {name!r} must be 1..{limit} bytes without whitespace or NUL")
    return raw


def metadata_region_size(max_pmos: int) -> int:
    raw = COUNT_LINE + max_pmos * ENTRY_SIZE
    return -(-raw // PAGE_SIZE) * PAGE_SIZE


def _u64(raw, off) -> int:
    return int.from_bytes(bytes(raw[off:off + 8]), "little")


@dataclass
class SystemHeader:
    magic: bytes
    system_name: str
    total_size: int
    metadata_offset: int
    data_offset: int
    next_free: int
    boot_id: int
    free_list_head: int
    max_pmos: int

    def pack(self) -> bytes:
        buf = bytearray(PAGE_SIZE)
        buf[0:8] = self.magic.ljust(8, b"\0")
        buf[0x08:0x48] = self.system_name.encode("utf-8").ljust(64, b"\0")
        for name in ("total_size", "metadata_offset", "data_offset", "next_free",
                     "boot_id", "free_list_head", "max_pmos"):
            off = HEADER_FIELDS[name]
            buf[off:off + 8] = getattr(self, name).to_bytes(8, "little")
        return bytes(buf)

    @classmethod
    def unpack(cls, raw) -> "SystemHeader":
        raw = bytes(raw)
        return cls(
            magic=raw[0:8],
            system_name=raw[0x08:0x48].rstrip(b"\0").decode("utf-8", "replace"),
            **{name: _u64(raw, HEADER_FIELDS[name])
               for name in ("total_size", "metadata_offset", "data_offset", "next_free",
                            "boot_id", "free_list_head", "max_pmos")},
        )

    @property
    def data_size(self) -> int:
        return self.total_size - self.data_offset


@dataclass
class MetadataEntry:
    slot: int
    status: int
    state: int
    name: str
    size: int
    primary_offset: int
    shadow_offset: int
    attached_pid: int
    attach_boot_id: int
    read_key: int
    write_key: int
    reader_count: int

    @property
    def pages(self) -> int:
        return self.size // PAGE_SIZE

    @property
    def live(self) -> bool:
        return self.status == SLOT_LIVE

    @property
    def state_name(self) -> str:
        return STATE_NAMES.get(self.state, "?")

    @property
    def bitmap_pages(self) -> int:
        return _kernels.bitmap_pages(self.pages)

    def pack(self) -> bytes:
        buf = bytearray(ENTRY_SIZE)
        buf[0:8] = (self.state | self.status << 8).to_bytes(8, "little")
        for off, val in ((E_SHADOW, self.shadow_offset), (E_PID, self.attached_pid),
                         (E_BOOT, self.attach_boot_id), (E_READERS, self.reader_count)):
            buf[off:off + 8] = val.to_bytes(8, "little")
        buf[E_NAME:E_NAME + _BODY.size] = _BODY.pack(
            self.name.encode("utf-8"), self.size, self.primary_offset, self.read_key, self.write_key)
        return bytes(buf)

    @classmethod
    def unpack(cls, slot: int, raw) -> "MetadataEntry":
        raw = bytes(raw)
        control = _u64(raw, E_CONTROL)
        name, size, primary, rkey, wkey = _BODY.unpack_from(raw, E_NAME)
        return cls(
            slot=slot, status=(control >> 8) & 0xFF, state=control & 0xFF,
            name=name.rstrip(b"\0").decode("utf-8", "replace"), size=size,
            primary_offset=primary, shadow_offset=_u64(raw, E_SHADOW),
            attached_pid=_u64(raw, E_PID), attach_boot_id=_u64(raw, E_BOOT),
            read_key=rkey, write_key=wkey, reader_count=_u64(raw, E_READERS),
        )


def uncached_ranges(max_pmos: int) -> list[tuple[int, int]]:
    """Header page, metadata count line and the control line of every entry."""
    ranges = [(0, PAGE_SIZE), (METADATA_OFFSET, COUNT_LINE)]
    first = METADATA_OFFSET + COUNT_LINE
    ranges += [(first + i * ENTRY_SIZE, LINE_SIZE) for i in range(max_pmos)]
    return ranges


def _zero_durable(dev: Device, offset: int, length: int) -> int:
    """Zero a page-aligned range, touching only pages that hold data; fence at the end.

    Returns the number of pages rewritten.
    """
    buf = dev.read_volatile(offset, length)
    pages = _kernels.nonzero_pages(buf)
    for p in pages:
        base = offset + int(p) * PAGE_SIZE
        if not dev._touches_uncached(base, PAGE_SIZE):
            dev.persist(base, np.zeros(PAGE_SIZE, np.uint8))
            continue
        for line in range(base, base + PAGE_SIZE, LINE_SIZE):
            rel = line - offset
            if not buf[rel:rel + LINE_SIZE].any():
                continue
            if dev._touches_uncached(line, LINE_SIZE):
                for w in range(0, LINE_SIZE, 8):
                    if buf[rel + w:rel + w + 8].any():
                        dev.uncached_atomic_write(line + w, 0)
            else:
                dev.persist(line, np.zeros(LINE_SIZE, np.uint8))
    dev.fence()
    return len(pages)


def format_device(dev: Device, system_name: str, max_pmos: int) -> SystemHeader:
    """Zero the device and lay down an empty PMO system (``mkpmo``)."""
    encode_name(system_name, SYSTEM_NAME_MAX)
    if max_pmos < 1:
        raise FormatError("max_pmos must be at least 1")
    meta = metadata_region_size(max_pmos)
    data_offset = METADATA_OFFSET + meta
    if dev.size < data_offset + PAGE_SIZE:
        raise FormatError(
            f"device of {dev.size} bytes cannot hold header, {meta}-byte metadata region "
            f"for {max_pmos} PMOs and one data page")
    dev.set_uncached_ranges(uncached_ranges(max_pmos))
    # magic goes first and comes back last: a torn format never looks formatted
    dev.uncached_atomic_write(0, 0)
    _zero_durable(dev, 0, dev.size)
    header = SystemHeader(MAGIC, system_name, dev.size, METADATA_OFFSET, data_offset,
                          next_free=0, boot_id=1, free_list_head=0, max_pmos=max_pmos)
    packed = header.pack()
    for off in range(8, HEADER_USED, 8):
        word = _u64(packed, off)
        if word:
            dev.uncached_atomic_write(off, word)
    dev.uncached_atomic_write(0, _u64(packed, 0))
    return header


def read_header(dev: Device) -> SystemHeader:
    header = SystemHeader.unpack(dev.read_volatile(0, PAGE_SIZE))
    if header.magic != MAGIC:
        raise NotFormattedError("device is not formatted as a PMO system (bad magic)")
    if (header.metadata_offset != METADATA_OFFSET or header.total_size != dev.size
            or header.max_pmos < 1
            or header.data_offset < METADATA_OFFSET + metadata_region_size(header.max_pmos)
            or header.data_offset % PAGE_SIZE or header.next_free % PAGE_SIZE
            or header.next_free > header.data_size):
        raise NotFormattedError("PMO system header is inconsistent with the device")
    return header


@dataclass
class FreeExtent:
    page_offset: int
    pages: int


class Volume:
    """A view of a formatted device: cached header, hashtable, allocator.

    Constructing a view does not write anything; :func:`open_system` mounts it.
    Mutations are serialized behind ``lock``.
    """

    def __init__(self, dev: Device):
        self.dev = dev
        self.header = read_header(dev)
        self.lock = threading.RLock()
        dev.set_uncached_ranges(uncached_ranges(self.header.max_pmos))

    # -- geometry -----------------------------------------------------------
    @property
    def max_pmos(self) -> int:
        return self.header.max_pmos

    @property
    def data_offset(self) -> int:
        return self.header.data_offset

    @property
    def data_size(self) -> int:
        return self.header.data_size

    @property
    def boot_id(self) -> int:
        return self.header.boot_id

    def entry_offset(self, slot: int) -> int:
        if not 0 <= slot < self.max_pmos:
            raise RangeError(f"slot {slot} outside table of {self.max_pmos}")
        return METADATA_OFFSET + COUNT_LINE + slot * ENTRY_SIZE

    def page_addr(self, page_offset: int) -> int:
        """Absolute device offset of a data-region page."""
        return self.data_offset + page_offset * PAGE_SIZE

    # -- header ---------------------------------------------------------------
    def _set_header(self, name: str, value: int) -> None:
        self.dev.uncached_atomic_write(HEADER_FIELDS[name], value)
        setattr(self.header, name, value)

    def bump_boot_id(self) -> int:
        with self.lock:
            self._set_header("boot_id", self.header.boot_id + 1)
            return self.header.boot_id

    @property
    def allocated_count(self) -> int:
        return self.dev.read_u64(METADATA_OFFSET)

    def _set_count(self, n: int) -> None:
        self.dev.uncached_atomic_write(METADATA_OFFSET, n)

    # -- entries --------------------------------------------------------------
    def read_entry(self, slot: int) -> MetadataEntry:
        return MetadataEntry.unpack(slot, self.dev.read_volatile(self.entry_offset(slot), ENTRY_SIZE))

    def write_field(self, slot: int, field: int, value: int) -> None:
        """Atomically and durably update one word of an entry's control line."""
        if field >= LINE_SIZE:
            raise DomainError("only control-line fields are updated in place")
        self.dev.uncached_atomic_write(self.entry_offset(slot) + field, value)

    def set_control(self, slot: int, state: int, status: int = SLOT_LIVE) -> None:
        self.write_field(slot, E_CONTROL, state | status << 8)

    def entries(self) -> list[MetadataEntry]:
        raw = self.dev.read_volatile(self.entry_offset(0), self.max_pmos * ENTRY_SIZE)
        return [MetadataEntry.unpack(i, raw[i * ENTRY_SIZE:(i + 1) * ENTRY_SIZE])
                for i in range(self.max_pmos)]

    def live_entries(self) -> list[MetadataEntry]:
        return [e for e in self.entries() if e.status == SLOT_LIVE]

    def _probe(self, raw_name: bytes):
        """Return ``(slot of live match, first reusable slot)`` along the probe sequence."""
        start = fnv1a64(raw_name) % self.max_pmos
        reusable = None
        for i in range(self.max_pmos):
            slot = (start + i) % self.max_pmos
            e = self.read_entry(slot)
            if e.status == SLOT_EMPTY:
                return None, slot if reusable is None else reusable
            if e.status == SLOT_LIVE and e.name.encode("utf-8") == raw_name:
                return slot, None
            if e.status == SLOT_TOMBSTONE and reusable is None:
                reusable = slot
        return None, reusable

    def lookup_entry(self, name) -> MetadataEntry | None:
        slot, _ = self._probe(encode_name(name))
        return None if slot is None else self.read_entry(slot)

    def insert_entry(self, name, size: int, primary_offset: int,
                     read_key: int, write_key: int) -> MetadataEntry:
        """Create a live entry in state D; the control-word write is the commit point."""
        raw = encode_name(name)
        with self.lock:
            found, slot = self._probe(raw)
            if found is not None:
                raise AlreadyExistsError(f"PMO {name!r} already exists")
            if slot is None or self.allocated_count >= self.max_pmos:
                raise CapacityError(f"metadata hashtable full ({self.max_pmos} entries)")
            base = self.entry_offset(slot)
            for field in (E_SHADOW, E_PID, E_BOOT, E_READERS):
                if self.dev.read_u64(base + field):
                    self.write_field(slot, field, 0)
            body = _BODY.pack(raw, size, primary_offset, read_key, write_key)
            self.dev.persist(base + E_NAME, body)
            self.dev.fence()
            self.set_control(slot, STATE_D, SLOT_LIVE)
            self._set_count(self.allocated_count + 1)
            return self.read_entry(slot)

    def remove_entry(self, slot: int) -> None:
        """Finish destroying an entry: free its primary, tombstone it, fix the count."""
        with self.lock:
            e = self.read_entry(slot)
            if e.status not in (SLOT_LIVE, SLOT_DESTROYING):
                raise DomainError(f"slot {slot} holds no entry")
            self.set_control(slot, e.state, SLOT_DESTROYING)
            self.free_extent(e.primary_offset, e.pages, idempotent=True)
            self.set_control(slot, 0, SLOT_TOMBSTONE)
            self._set_count(sum(1 for x in self.entries() if x.status == SLOT_LIVE))

    def release_shadow(self, slot: int) -> None:
        """Free an entry's shadow extent and clear its writer signature."""
        with self.lock:
            e = self.read_entry(slot)
            if e.shadow_offset:
                self.free_extent(e.shadow_offset - e.bitmap_pages, e.bitmap_pages + e.pages,
                                 idempotent=True)
                self.write_field(slot, E_SHADOW, 0)
            if e.attached_pid:
                self.write_field(slot, E_PID, 0)
            if e.attach_boot_id and not e.reader_count:
                self.write_field(slot, E_BOOT, 0)

    def mount_sweep(self) -> None:
        """Finish metadata housekeeping a crash may have interrupted.

        Completes pending destroys and shadow releases of detached entries (both
        would otherwise leave freed extents referenced) and reconciles the count.
        Never copies PMO data; state-driven recovery stays with the store.
        """
        with self.lock:
            for e in self.entries():
                if e.status == SLOT_DESTROYING:
                    self.remove_entry(e.slot)
                elif e.status == SLOT_LIVE and e.state == STATE_D and e.shadow_offset:
                    self.release_shadow(e.slot)
            live = sum(1 for x in self.entries() if x.status == SLOT_LIVE)
            if live != self.allocated_count:
                self._set_count(live)

    # -- allocator --------------------------------------------------------------
    def _node(self, addr: int) -> tuple[int, int]:
        raw = self.dev.read_volatile(addr, 24)
        magic, nxt, pages = struct.unpack("<QQQ", raw.tobytes())
        if magic != FREE_MAGIC:
            raise DomainError(f"corrupt free-list node at {addr:#x}")
        return nxt, pages

    def free_extents(self) -> list[FreeExtent]:
        out = []
        addr = self.header.free_list_head
        while addr:
            nxt, pages = self._node(addr)
            out.append(FreeExtent((addr - self.data_offset) // PAGE_SIZE, pages))
            if len(out) > self.data_size // PAGE_SIZE:
                raise DomainError("free list does not terminate")
            addr = nxt
        return out

    def _link(self, prev: int, target: int) -> None:
        if prev == 0:
            self._set_header("free_list_head", target)
        else:
            self.dev.persist(prev + 8, target.to_bytes(8, "little"))
            self.dev.fence()

    def _write_node(self, addr: int, nxt: int, pages: int) -> None:
        self.dev.persist(addr, struct.pack("<QQQ", FREE_MAGIC, nxt, pages))
        self.dev.fence()

    def allocate_extent(self, pages: int) -> int:
        """Reserve ``pages`` contiguous pages; returns their page offset in the data region."""
        if pages < 1:
            raise DomainError("extent must span at least one page")
        with self.lock:
            prev, addr = 0, self.header.free_list_head
            while addr:
                nxt, have = self._node(addr)
                if have >= pages:
                    if have > pages:
                        rest = addr + pages * PAGE_SIZE
                        self._write_node(rest, nxt, have - pages)
                        nxt = rest
                    self._link(prev, nxt)
                    return (addr - self.data_offset) // PAGE_SIZE
                prev, addr = addr, nxt
            start = self.header.next_free
            if start + pages * PAGE_SIZE > self.data_size:
                raise OutOfSpaceError(
                    f"no room for {pages} pages ({(self.data_size - start) // PAGE_SIZE} left)")
            self._set_header("next_free", start + pages * PAGE_SIZE)
            return start // PAGE_SIZE

    def free_extent(self, page_offset: int, pages: int, idempotent: bool = False) -> None:
        """Return an extent to the free list, coalescing with its neighbours.

        With ``idempotent`` an extent already wholly free is accepted silently;
        that is how interrupted releases are re-run.
        """
        if pages < 1 or page_offset < 0:
            raise DomainError(f"bad extent ({page_offset}, {pages})")
        start = self.data_offset + page_offset * PAGE_SIZE
        end = start + pages * PAGE_SIZE
        with self.lock:
            if end - self.data_offset > self.header.next_free:
                raise DomainError(f"extent ({page_offset}, {pages}) was never allocated")
            prev = prev_end = 0
            addr = self.header.free_list_head
            nxt_pages = 0
            while addr:
                nxt, have = self._node(addr)
                node_end = addr + have * PAGE_SIZE
                if addr < end and start < node_end:
                    if idempotent and addr <= start and end <= node_end:
                        return
                    raise DomainError(f"double free of extent ({page_offset}, {pages})")
                if addr >= end:
                    nxt_pages = have
                    break
                prev, prev_end = addr, node_end
                addr = nxt
            succ = addr
            join_prev = prev != 0 and prev_end == start
            join_next = succ != 0 and succ == end
            if join_prev:
                prev_pages = (prev_end - prev) // PAGE_SIZE
                if join_next:
                    succ_next, _ = self._node(succ)
                    raw = struct.pack("<QQ", succ_next, prev_pages + pages + nxt_pages)
                else:
                    raw = struct.pack("<QQ", succ, prev_pages + pages)
                self.dev.persist(prev + 8, raw)
                self.dev.fence()
            elif join_next:
                succ_next, _ = self._node(succ)
                self._write_node(start, succ_next, pages + nxt_pages)
                self._link(prev, start)
            else:
                self._write_node(start, succ, pages)
                self._link(prev, start)

    def live_extents(self) -> list[tuple[int, int, str]]:
        """``(page_offset, pages, owner)`` for every primary and shadow extent."""
        out = []
        for e in self.entries():
            if e.status not in (SLOT_LIVE, SLOT_DESTROYING):
                continue
            out.append((e.primary_offset, e.pages, f"{e.name}:primary"))
            if e.shadow_offset:
                out.append((e.shadow_offset - e.bitmap_pages, e.bitmap_pages + e.pages,
                            f"{e.name}:shadow"))
        return out


def open_system(dev: Device) -> Volume:
    """Mount a formatted device: bump the boot id durably, then sweep metadata."""
    vol = Volume(dev)
    vol.bump_boot_id()
    vol.mount_sweep()
    return vol


def inspect_lines(dev: Device) -> list[str]:
    """Stable, non-mutating text dump: header, metadata, one line per live entry."""
    vol = Volume(dev)
    h = vol.header
    lines = [
        f"header magic {h.magic.decode('ascii', 'replace')} name {h.system_name} "
        f"total_size {h.total_size} metadata_offset {h.metadata_offset} "
        f"data_offset {h.data_offset} next_free {h.next_free} boot_id {h.boot_id} "
        f"free_list_head {h.free_list_head} max_pmos {h.max_pmos}",
        f"metadata allocated_count {vol.allocated_count} capacity {h.max_pmos} "
        f"region_size {metadata_region_size(h.max_pmos)}",
        f"data size {h.data_size} free_extents {len(vol.free_extents())}",
    ]
    for e in vol.entries():
        if e.status in (SLOT_LIVE, SLOT_DESTROYING):
            lines.append(
                f"entry slot {e.slot} name {e.name} state {e.state_name} size {e.size} "
                f"primary {e.primary_offset} shadow {e.shadow_offset} readers {e.reader_count} "
                f"pid {e.attached_pid} boot {e.attach_boot_id}")
    return lines


def parse_inspect(lines) -> dict:
    """Parse :func:`inspect_lines` output back into dictionaries (used by tests and tools)."""
    out = {"entries": []}
    for line in lines:
        kind, *rest = line.split()
        rec = dict(zip(rest[0::2], rest[1::2]))
        rec = {k: int(v) if re.fullmatch(r"-?\d+", v) else v for k, v in rec.items()}
        if kind == "entry":
            out["entries"].append(rec)
        else:
            out[kind] = rec
    return out


__all__ = [
    "MAGIC", "SystemHeader", "MetadataEntry", "Volume", "FreeExtent", "format_device",
    "open_system", "read_header", "inspect_lines", "parse_inspect", "fnv1a64",
    "metadata_region_size", "uncached_ranges", "STATE_D", "STATE_R", "STATE_W", "STATE_P",
    "STATE_C", "STATE_NAMES",
]
