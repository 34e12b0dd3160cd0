"""Compare the numba kernels against the pure-numpy fallback.

Sizes follow the hot paths: a 64 MiB PMO (16384 pages) bitmap, sparse and
dense dirty sets, a crash image with a few hundred pending lines.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from pmo import _kernels as K


def cases(rng):
    n = 16384
    bm = rng.integers(0, 256, K.bitmap_bytes(n), dtype=np.uint8)
    sparse = np.sort(rng.choice(n, 16, replace=False)).astype(np.int64)
    dense = np.arange(n, dtype=np.int64)
    image = np.zeros(16 << 20, np.uint8)
    offs = np.sort(rng.choice(image.size // 64, 400, replace=False)).astype(np.int64) * 64
    lines = rng.integers(0, 256, (offs.size, 64), dtype=np.uint8)
    a = rng.integers(0, 256, 4 << 20, dtype=np.uint8)
    b = a.copy()
    b[rng.choice(a.size, 50, replace=False)] ^= 1
    buf = np.zeros(16 << 20, np.uint8)
    buf[rng.choice(buf.size, 20, replace=False)] = 1
    return [
        ("pages_with_bit 16384", lambda impl: impl.pages_with_bit(bm, n, K.DIRTY)),
        ("test_pages sparse", lambda impl: impl.test_pages(bm, sparse, K.PRESENT)),
        ("set_bits dense", lambda impl: impl.set_bits(bm.copy(), dense, K.DIRTY)),
        ("clear_bits dense", lambda impl: impl.clear_bits(bm.copy(), dense, K.DIRTY)),
        ("page_runs dense", lambda impl: impl.page_runs(dense)),
        ("differing_lines 4MiB", lambda impl: impl.differing_lines(a, b)),
        ("apply_lines 400", lambda impl: impl.apply_lines(image, offs, lines)),
        ("nonzero_pages 16MiB", lambda impl: impl.nonzero_pages(buf)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if K.numba_impl is None:
        raise SystemExit("numba is not available (or PMO_DISABLE_NUMBA is set)")
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, fn in cases(rng):
        fn(K.numba_impl)  # compile outside the timing
        t_np = min(timeit.repeat(lambda: fn(K.numpy_impl), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn(K.numba_impl), number=1, repeat=args.repeat))
        print(f"{name:24s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
