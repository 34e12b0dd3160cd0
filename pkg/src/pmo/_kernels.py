"""Hot inner loops over page bitmaps and cache-line images.

Each kernel exists twice: an explicit-loop version compiled with numba
``@njit`` and a vectorized pure-numpy version.  The numba path is used when
numba imports cleanly and ``PMO_DISABLE_NUMBA`` is unset (or ``0``); both
paths return identical results and are cross-checked in the test-suite.

Page bitmap encoding: two bits per page, page ``i`` lives in byte ``i // 4``
at bit ``2 * (i % 4)`` (PRESENT) and ``2 * (i % 4) + 1`` (DIRTY).
"""

import os
from types import SimpleNamespace

import numpy as np

LINE = 64
PAGE = 4096
PRESENT = 0
DIRTY = 1


def _want_numba():
    flag = os.environ.get("PMO_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


# --------------------------------------------------------------------------
# numpy fallback
# --------------------------------------------------------------------------

def _np_bit_values(bitmap, n_pages, bit):
    pages = np.arange(n_pages, dtype=np.int64)
    shifts = (2 * (pages & 3) + bit).astype(np.uint8)
    return (bitmap[pages >> 2] >> shifts) & 1


def np_pages_with_bit(bitmap, n_pages, bit):
    return np.flatnonzero(_np_bit_values(bitmap, n_pages, bit)).astype(np.int64)


def np_test_pages(bitmap, pages, bit):
    pages = np.asarray(pages, dtype=np.int64)
    shifts = (2 * (pages & 3) + bit).astype(np.uint8)
    return ((bitmap[pages >> 2] >> shifts) & 1).astype(np.bool_)


def np_set_bits(bitmap, pages, bit):
    pages = np.asarray(pages, dtype=np.int64)
    masks = (np.uint8(1) << (2 * (pages & 3) + bit).astype(np.uint8)).astype(np.uint8)
    np.bitwise_or.at(bitmap, pages >> 2, masks)


def np_clear_bits(bitmap, pages, bit):
    pages = np.asarray(pages, dtype=np.int64)
    masks = (np.uint8(1) << (2 * (pages & 3) + bit).astype(np.uint8)).astype(np.uint8)
    np.bitwise_and.at(bitmap, pages >> 2, ~masks)


def np_page_runs(pages):
    pages = np.asarray(pages, dtype=np.int64)
    if pages.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    breaks = np.flatnonzero(np.diff(pages) != 1) + 1
    starts_idx = np.concatenate(([0], breaks))
    ends_idx = np.concatenate((breaks, [pages.size]))
    return pages[starts_idx], (ends_idx - starts_idx).astype(np.int64)


def np_differing_lines(a, b):
    n = a.size // LINE
    diff = (a[: n * LINE] != b[: n * LINE]).reshape(n, LINE).any(axis=1)
    return np.flatnonzero(diff).astype(np.int64)


def np_apply_lines(image, offsets, lines):
    if len(offsets) == 0:
        return
    idx = np.asarray(offsets, dtype=np.int64)[:, None] + np.arange(LINE)
    image[idx] = lines


def np_nonzero_pages(buf):
    n = buf.size // PAGE
    return np.flatnonzero(buf[: n * PAGE].reshape(n, PAGE).any(axis=1)).astype(np.int64)


numpy_impl = SimpleNamespace(
    name="numpy",
    pages_with_bit=np_pages_with_bit,
    test_pages=np_test_pages,
    set_bits=np_set_bits,
    clear_bits=np_clear_bits,
    page_runs=np_page_runs,
    differing_lines=np_differing_lines,
    apply_lines=np_apply_lines,
    nonzero_pages=np_nonzero_pages,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def pages_with_bit(bitmap, n_pages, bit):
        out = np.empty(n_pages, np.int64)
        k = 0
        for p in range(n_pages):
            if (bitmap[p >> 2] >> (2 * (p & 3) + bit)) & 1:
                out[k] = p
                k += 1
        return out[:k]

    @njit(cache=True)
    def test_pages(bitmap, pages, bit):
        out = np.empty(pages.size, np.bool_)
        for i in range(pages.size):
            p = pages[i]
            out[i] = ((bitmap[p >> 2] >> (2 * (p & 3) + bit)) & 1) == 1
        return out

    @njit(cache=True)
    def set_bits(bitmap, pages, bit):
        for i in range(pages.size):
            p = pages[i]
            bitmap[p >> 2] |= np.uint8(1 << (2 * (p & 3) + bit))

    @njit(cache=True)
    def clear_bits(bitmap, pages, bit):
        for i in range(pages.size):
            p = pages[i]
            bitmap[p >> 2] &= np.uint8(~(1 << (2 * (p & 3) + bit)) & 0xFF)

    @njit(cache=True)
    def page_runs(pages):
        n = pages.size
        starts = np.empty(n, np.int64)
        lengths = np.empty(n, np.int64)
        k = -1
        for i in range(n):
            if k >= 0 and pages[i] == starts[k] + lengths[k]:
                lengths[k] += 1
            else:
                k += 1
                starts[k] = pages[i]
                lengths[k] = 1
        return starts[: k + 1], lengths[: k + 1]

    @njit(cache=True)
    def differing_lines(a, b):
        n = a.size // 64
        out = np.empty(n, np.int64)
        k = 0
        for line in range(n):
            base = line * 64
            for j in range(64):
                if a[base + j] != b[base + j]:
                    out[k] = line
                    k += 1
                    break
        return out[:k]

    @njit(cache=True)
    def apply_lines(image, offsets, lines):
        for i in range(offsets.size):
            base = offsets[i]
            for j in range(64):
                image[base + j] = lines[i, j]

    @njit(cache=True)
    def nonzero_pages_words(words):
        # 512 eight-byte words per page
        n = words.size // 512
        out = np.empty(n, np.int64)
        k = 0
        for p in range(n):
            base = p * 512
            for j in range(512):
                if words[base + j] != 0:
                    out[k] = p
                    k += 1
                    break
        return out[:k]

    def nonzero_pages(buf):
        n = buf.size // PAGE
        return nonzero_pages_words(np.ascontiguousarray(buf[: n * PAGE]).view(np.uint64))

    def _pages(fn):
        def wrapper(bitmap, pages, bit):
            return fn(bitmap, np.ascontiguousarray(pages, dtype=np.int64), bit)
        return wrapper

    def _apply(image, offsets, lines):
        offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        if offsets.size:
            apply_lines(image, offsets, np.ascontiguousarray(lines, dtype=np.uint8).reshape(-1, 64))

    return SimpleNamespace(
        name="numba",
        pages_with_bit=pages_with_bit,
        test_pages=_pages(test_pages),
        set_bits=_pages(set_bits),
        clear_bits=_pages(clear_bits),
        page_runs=lambda pages: page_runs(np.ascontiguousarray(pages, dtype=np.int64)),
        differing_lines=differing_lines,
        apply_lines=_apply,
        nonzero_pages=nonzero_pages,
    )


numba_impl = None
if _want_numba():
    try:
        numba_impl = _build_numba()
    except ImportError:
        numba_impl = None

impl = numba_impl if numba_impl is not None else numpy_impl
BACKEND = impl.name

pages_with_bit = impl.pages_with_bit
test_pages = impl.test_pages
set_bits = impl.set_bits
clear_bits = impl.clear_bits
page_runs = impl.page_runs
differing_lines = impl.differing_lines
apply_lines = impl.apply_lines
nonzero_pages = impl.nonzero_pages


def bitmap_bytes(n_pages):
    return (2 * n_pages + 7) // 8


def bitmap_pages(n_pages):
    return max(1, -(-bitmap_bytes(n_pages) // PAGE))
