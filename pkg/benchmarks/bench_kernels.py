"""Compare the numba and pure-numpy convolution kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--length L]

Both paths are imported from the same module; the numba path is the one
selected by default, the numpy path is what ``HYPNOKIT_DISABLE_NUMBA=1``
switches to. Shapes mimic the widest and the longest layers of the reduced
model (batch 8, 35-epoch segments at 128 Hz).
"""

import argparse
import time

import numpy as np

from hypnokit.net import kernels

SHAPES = [
    # (channels_in, channels_out, kernel, length)
    (2, 5, 9, 35 * 3840),
    (12, 14, 9, 35 * 3840 // 8),
    (36, 44, 9, 35 * 3840 // 64),
]


def timed(fn, *args, repeats=3):
    fn(*args)  # warm-up (numba compiles here)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args(argv)
    if not kernels.NUMBA_AVAILABLE:
        print("numba not installed; only the numpy path is available")
        return 1

    rng = np.random.default_rng(0)
    print(f"{'shape':>26} {'pass':>8} {'numpy s':>9} {'numba s':>9} {'speedup':>8} {'max |diff|':>11}")
    for cin, cout, k, length in SHAPES:
        x = rng.standard_normal((args.batch, cin, length)).astype(np.float32)
        w = rng.standard_normal((cout, cin, k)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        g = rng.standard_normal((args.batch, cout, length)).astype(np.float32)
        pad = (k - 1) // 2
        label = f"{cin}->{cout} k{k} L{length}"

        t_np = timed(kernels.conv1d_forward_numpy, x, w, b, pad, repeats=args.repeats)
        t_nb = timed(kernels.conv1d_forward_numba, x, w, b, pad, repeats=args.repeats)
        diff = np.abs(kernels.conv1d_forward_numpy(x, w, b, pad) - kernels.conv1d_forward_numba(x, w, b, pad)).max()
        print(f"{label:>26} {'fwd':>8} {t_np:9.4f} {t_nb:9.4f} {t_np / t_nb:8.2f} {diff:11.2e}")

        t_np = timed(kernels.conv1d_backward_numpy, x, w, g, pad, repeats=args.repeats)
        t_nb = timed(kernels.conv1d_backward_numba, x, w, g, pad, repeats=args.repeats)
        ref = kernels.conv1d_backward_numpy(x, w, g, pad)
        got = kernels.conv1d_backward_numba(x, w, g, pad)
        diff = max(float(np.abs(a - c).max() / max(1.0, np.abs(a).max())) for a, c in zip(ref, got))
        print(f"{label:>26} {'bwd':>8} {t_np:9.4f} {t_nb:9.4f} {t_np / t_nb:8.2f} {diff:11.2e}")
    print(f"active backend: {kernels.backend()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
