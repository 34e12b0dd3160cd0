import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pmo import (DomainError, EventKind, LineAddr, MappedDevice, PersistenceModel, RangeError,
                 enumerate_crash_images)
from pmo.pmem import lines_spanning, survivor_subsets

SIZE = 4 * 4096
UNCACHED = (0, 128)


def model():
    m = PersistenceModel(size=SIZE)
    m.set_uncached_ranges([UNCACHED])
    return m


# -- brute-force replay oracle -------------------------------------------------
# An independent, dictionary-of-bytes reimplementation of the semantics.

class Replay:
    def __init__(self, size):
        self.media = bytearray(size)
        self.cache, self.pending = {}, {}

    def line(self, off):
        if off in self.cache:
            return self.cache[off]
        if off in self.pending:
            return bytearray(self.pending[off])
        return bytearray(self.media[off:off + 64])

    def apply(self, ev):
        if ev.kind is EventKind.STORE:
            for i, b in enumerate(ev.data):
                a = ev.addr + i
                base = a - a % 64
                buf = self.line(base)
                buf[a - base] = b
                self.cache[base] = buf
        elif ev.kind is EventKind.FLUSH:
            if ev.addr in self.cache:
                self.pending[ev.addr] = self.cache.pop(ev.addr)
        elif ev.kind is EventKind.FENCE:
            for off, buf in self.pending.items():
                self.media[off:off + 64] = buf
            self.pending = {}
        else:
            self.media[ev.addr:ev.addr + 8] = ev.data

    def volatile(self):
        out = bytearray(self.media)
        for layer in (self.pending, self.cache):
            for off, buf in layer.items():
                out[off:off + 64] = buf
        return bytes(out)

    def crash(self, survivors):
        out = bytearray(self.media)
        for off in survivors:
            out[off:off + 64] = self.pending[off]
        return bytes(out)


ops = st.one_of(
    st.tuples(st.just("store"), st.integers(128, SIZE - 200), st.binary(min_size=1, max_size=150)),
    st.tuples(st.just("flush"), st.integers(2, SIZE // 64 - 1)),
    st.tuples(st.just("fence")),
    st.tuples(st.just("uncached"), st.integers(0, 15), st.integers(0, 2**64 - 1)),
)


def run_ops(dev, seq):
    for op in seq:
        if op[0] == "store":
            dev.store(op[1], op[2])
        elif op[0] == "flush":
            dev.flush_line(op[1] * 64)
        elif op[0] == "fence":
            dev.fence()
        else:
            dev.uncached_atomic_write(op[1] * 8, op[2])


@given(st.lists(ops, max_size=40))
def test_volatile_and_durable_views_match_replay(seq):
    m = model()
    run_ops(m, seq)
    r = Replay(SIZE)
    for ev in m.event_log:
        r.apply(ev)
    assert m.read_volatile(0, SIZE).tobytes() == r.volatile()
    assert m.read_durable(0, SIZE).tobytes() == bytes(r.media)


@given(st.lists(ops, max_size=30), st.data())
def test_crash_images_are_media_plus_pending_subset(seq, data):
    m = model()
    run_ops(m, seq)
    k = data.draw(st.integers(0, m.seq))
    r = Replay(SIZE)
    for ev in m.event_log[:k]:
        r.apply(ev)
    images = m.enumerate_crash_images(at_seq=k, budget=64)
    expected = {r.crash(s) for s in survivor_subsets(sorted(r.pending), 64)}
    assert {img.tobytes() for img in images} == expected
    for img in images:
        assert img.crash_seq == k
        # no cache-only line ever reaches a crash image
        for off in set(r.cache) - set(r.pending):
            assert img.tobytes()[off:off + 64] == r.media[off:off + 64]


@given(st.lists(ops, max_size=30))
def test_uncached_words_never_tear(seq):
    m = model()
    run_ops(m, seq)
    for k, state in m.iter_states():
        for s in survivor_subsets(state.crash_lines(), 16):
            img = state.crash_image(s).tobytes()
            assert img[:128] == state.media[:128].tobytes()


@given(st.lists(ops, max_size=30))
def test_fence_never_shrinks_durable_set(seq):
    m = model()
    run_ops(m, seq)
    for k, state in m.iter_states():
        before = state.media.copy()
        pending = dict(state.pending)
        state.fence()
        for off, buf in pending.items():
            assert state.media[off:off + 64].tobytes() == buf.tobytes()
        untouched = np.ones(SIZE, bool)
        for off in pending:
            untouched[off:off + 64] = False
        np.testing.assert_array_equal(state.media[untouched], before[untouched])
        break


# -- worked examples ---------------------------------------------------------------

def test_store_is_volatile_until_flushed_and_fenced():
    m = model()
    m.store(0x2000, b"abcdefgh")
    assert m.read_volatile(0x2000, 8).tobytes() == b"abcdefgh"
    assert m.read_durable(0x2000, 8).tobytes() == bytes(8)
    assert m.enumerate_crash_images()[0].tobytes()[0x2000:0x2008] == bytes(8)


def test_store_spanning_two_lines():
    m = model()
    m.store(0x2000, bytes(range(128)))
    assert sorted(m.cache) == [0x2000, 0x2040]


@given(st.integers(0, 10_000), st.integers(0, 500))
def test_lines_spanning_matches_interval_arithmetic(offset, length):
    want = [l for l in range(0, offset + length + 64, 64)
            if max(l, offset) < min(l + 64, offset + length)]
    assert list(lines_spanning(offset, length)) == want


def test_flush_then_crash_survivors():
    m = model()
    m.store(0x2000, b"\x01" * 64)
    m.flush_line(LineAddr(0x2000))
    imgs = {tuple(sorted(i.survivor_set)): i.tobytes()[0x2000] for i in m.enumerate_crash_images()}
    assert imgs == {(): 0, (0x2000,): 1}


def test_flush_clean_line_is_logged_noop():
    m = model()
    m.flush_line(0x2000)
    assert m.seq == 1 and m.event_log[0].kind is EventKind.FLUSH
    assert not m.pending


def test_fence_makes_everything_durable():
    m = model()
    m.store(0x2000, b"\x01" * 64)
    m.store(0x3000, b"\x02" * 64)
    m.flush_line(0x2000)
    m.flush_line(0x3000)
    m.fence()
    imgs = m.enumerate_crash_images()
    assert len(imgs) == 1
    assert imgs[0].tobytes()[0x2000] == 1 and imgs[0].tobytes()[0x3000] == 2


def test_empty_fence_leaves_media():
    m = model()
    before = m.media.copy()
    m.fence()
    np.testing.assert_array_equal(m.media, before)


def test_uncached_write_is_immediately_durable():
    m = model()
    m.uncached_atomic_write(8, 0x1122)
    m.uncached_atomic_write(16, 0x3344)
    assert m.read_durable(8, 8).tobytes() == (0x1122).to_bytes(8, "little")
    first = m.state_at(1).crash_image(())
    assert first.tobytes()[8:24] == (0x1122).to_bytes(8, "little") + bytes(8)
    assert m.state_at(0).crash_image(()).tobytes()[8:16] == bytes(8)


def test_enumeration_counts():
    m = model()
    assert len(m.enumerate_crash_images()) == 1
    for off in (0x2000, 0x2040):
        m.store(off, b"\x05")
        m.flush_line(off)
    assert len(m.enumerate_crash_images(budget=4)) == 4
    assert len(enumerate_crash_images(m, m.seq, 2)) == 2


def test_sampling_is_exact_and_includes_extremes():
    lines = list(range(0, 64 * 10, 64))
    sample = survivor_subsets(lines, 50, seed=3)
    assert len(sample) == 50 == len(set(sample))
    assert frozenset() in sample and frozenset(lines) in sample
    assert sample == survivor_subsets(lines, 50, seed=3)
    assert survivor_subsets(lines, 50, seed=4) != sample


def test_distinct_only_drops_lines_equal_to_media():
    m = model()
    m.store(0x2000, bytes(64))
    m.flush_line(0x2000)
    m.store(0x3000, b"\x01")
    m.flush_line(0x3000)
    assert m.crash_lines() == [0x2000, 0x3000]
    assert m.crash_lines(distinct_only=True) == [0x3000]


@pytest.mark.parametrize("call,exc", [
    (lambda m: m.store(SIZE - 4, b"12345678"), RangeError),
    (lambda m: m.store(64, b"x"), DomainError),
    (lambda m: m.flush_line(0x2001), RangeError),
    (lambda m: m.uncached_atomic_write(0x2000, 1), DomainError),
    (lambda m: m.uncached_atomic_write(4, 1), RangeError),
    (lambda m: m.read_durable(SIZE, 1), RangeError),
    (lambda m: m.read_volatile(-1, 2), RangeError),
    (lambda m: m.state_at(5), RangeError),
])
def test_errors(call, exc):
    with pytest.raises(exc):
        call(model())


def test_line_addr_validates():
    with pytest.raises(RangeError):
        LineAddr(65)
    assert LineAddr(128).offset == 128


def test_event_seq_strictly_increasing():
    m = model()
    run_ops(m, [("store", 200, b"ab"), ("flush", 3), ("fence",), ("uncached", 1, 5)])
    assert [e.seq for e in m.event_log] == list(range(4))


def test_uncached_range_cannot_cover_cached_line():
    m = PersistenceModel(size=SIZE)
    m.store(0, b"x")
    with pytest.raises(DomainError):
        m.set_uncached_ranges([(0, 64)])


def test_checkpoint_roundtrip(tmp_path):
    m = model()
    m.store(0x2000, b"hello")
    m.flush_line(0x2000)
    m.fence()
    m.checkpoint(tmp_path / "img")
    again = PersistenceModel.from_file(tmp_path / "img")
    np.testing.assert_array_equal(again.media, m.media)


# -- pass-through backend -------------------------------------------------------------

@given(st.lists(ops, max_size=40))
def test_backends_agree_after_final_fence(seq):
    sim = model()
    mapped = MappedDevice(size=SIZE)
    mapped.set_uncached_ranges([UNCACHED])
    run_ops(sim, seq)
    run_ops(mapped, seq)
    sim.fence()
    mapped.fence()
    # everything still in the simulated cache is what a final flush would write
    sim.flush_range(0, SIZE)
    sim.fence()
    assert mapped.read_durable(0, SIZE).tobytes() == sim.media.tobytes()
    mapped.close()


def test_mapped_device_persists_to_file(tmp_path):
    path = tmp_path / "dev.img"
    with MappedDevice.create(path, SIZE) as dev:
        dev.set_uncached_ranges([UNCACHED])
        dev.persist(0x1000, b"durable")
        dev.uncached_atomic_write(8, 42)
        dev.fence()
    raw = path.read_bytes()
    assert raw[0x1000:0x1007] == b"durable"
    assert int.from_bytes(raw[8:16], "little") == 42
    assert hashlib.sha256(raw).hexdigest() == hashlib.sha256(raw).hexdigest()


def test_mapped_device_size_mismatch(tmp_path):
    path = tmp_path / "dev.img"
    path.write_bytes(bytes(SIZE))
    with pytest.raises(RangeError):
        MappedDevice(path, size=2 * SIZE)
