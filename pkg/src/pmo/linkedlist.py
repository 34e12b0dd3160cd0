"""Sorted singly linked list living entirely inside one PMO.

Nodes hold absolute pointers: the address of the next node in the PMO's
attach range, or 0 for the end of the list.  Because a PMO attaches at the
same address in every session, the pointers stay valid across detach and
re-attach without any translation.

PMO layout::

    0x00  magic "PMOLIST1"
    0x08  next_free   byte offset of the bump allocator
    0x10  count       nodes inserted
    0x40  sentinel head node
    0x50  first allocated node ...

A node is 16 bytes: ``next`` (u64 address) then ``data`` (i64).
"""

from __future__ import annotations

import struct

from .errors import DomainError, FormatError, OutOfSpaceError
from .store import PmoHandle, PmoSystem

LIST_MAGIC = b"PMOLIST1"
HEAD_OFFSET = 0x40
NODE = struct.Struct("<Qq")
_HDR = struct.Struct("<8sQQ")


class PersistentList:
    """View of a list stored in an attached PMO."""

    def __init__(self, handle: PmoHandle):
        self.h = handle
        magic, self._next_free, self._count = _HDR.unpack(handle.read(0, _HDR.size))
        if magic != LIST_MAGIC:
            raise FormatError(f"PMO {handle.name!r} holds no list")

    @classmethod
    def format(cls, handle: PmoHandle) -> "PersistentList":
        handle.write(0, _HDR.pack(LIST_MAGIC, HEAD_OFFSET + NODE.size, 0))
        handle.write(HEAD_OFFSET, NODE.pack(0, 0))
        return cls(handle)

    @property
    def head(self) -> int:
        return self.h.addr(HEAD_OFFSET)

    def __len__(self) -> int:
        return self._count

    def _node(self, addr: int) -> tuple[int, int]:
        return NODE.unpack(self.h.read(self.h.offset_of(addr), NODE.size))

    def _set_next(self, addr: int, nxt: int) -> None:
        self.h.store_u64(addr, nxt)

    def _alloc(self) -> int:
        off = self._next_free
        if off + NODE.size > self.h.size:
            raise OutOfSpaceError(f"PMO {self.h.name!r} is full after {self._count} nodes")
        self._next_free += NODE.size
        self.h.write(8, struct.pack("<Q", self._next_free))
        return self.h.addr(off)

    def insert(self, data: int) -> int:
        """Insert keeping the list sorted; returns the new node's address."""
        new = self._alloc()
        c = self.head
        nxt, _ = self._node(c)
        while nxt != 0 and self._node(nxt)[1] < data:
            c = nxt
            nxt = self._node(c)[0]
        self.h.write(self.h.offset_of(new), NODE.pack(nxt, data))
        self._set_next(c, new)
        self._count += 1
        self.h.write(0x10, struct.pack("<Q", self._count))
        return new

    def __iter__(self):
        nxt = self._node(self.head)[0]
        while nxt:
            nxt, data = self._node(nxt)
            yield data

    def check(self) -> int:
        """Walk the list validating every pointer; returns the node count."""
        lo, hi = self.h.addr(HEAD_OFFSET + NODE.size), self.h.addr(self._next_free)
        seen, prev = 0, None
        nxt = self._node(self.head)[0]
        while nxt:
            if not lo <= nxt < hi or (nxt - lo) % NODE.size:
                raise DomainError(f"pointer {nxt:#x} outside the node area")
            seen += 1
            if seen > self._count:
                raise DomainError("list is longer than its count (cycle?)")
            nxt, data = self._node(nxt)
            if prev is not None and data < prev:
                raise DomainError("list is not sorted")
            prev = data
        if seen != self._count:
            raise DomainError(f"walked {seen} nodes, header says {self._count}")
        return seen


def insert_and_sync(system: PmoSystem, name, key, values) -> int:
    """Attach for writing, insert ``values``, psync and detach.  Returns the new length."""
    h = system.attach(name, "w", key)
    try:
        try:
            lst = PersistentList(h)
        except FormatError:
            lst = PersistentList.format(h)
        for v in values:
            lst.insert(v)
        system.psync(h)
        return len(lst)
    finally:
        system.detach(h)


def read_list(system: PmoSystem, name, key) -> list[int]:
    """Attach read-only, check and return the list contents."""
    h = system.attach(name, "r", key)
    try:
        lst = PersistentList(h)
        lst.check()
        return list(lst)
    finally:
        system.detach(h)
