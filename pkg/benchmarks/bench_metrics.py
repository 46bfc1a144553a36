#!/usr/bin/env python3
"""Time the metric kernels with numba and with the numpy fallback.

    python benchmarks/bench_metrics.py [--size 64] [--repeats 20]
"""
import argparse
import time

import numpy as np

from polypdiff import _accel
from polypdiff.metrics import _kernels as K
from polypdiff.metrics import e_measure_mean, weighted_fbeta


def _time(fn, repeats):
    fn()  # warm-up (numba compile)
    start = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    return (time.perf_counter() - start) / repeats, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[: args.size, : args.size]
    c = args.size / 2
    gt = (yy - c) ** 2 + (xx - c * 0.8) ** 2 < (args.size / 4) ** 2
    prob = np.clip(gt + rng.normal(0, 0.3, gt.shape), 0, 1)
    kernel = rng.random((7, 7))
    thresholds = np.arange(256) / 255.0

    print(f"numba available: {_accel.HAVE_NUMBA}  (POLYPDIFF_NUMBA selects the default backend: {_accel.backend_name()})")
    print(f"frame {args.size}x{args.size}, {args.repeats} repeats\n")
    cases = {
        "nearest_foreground": lambda nb: (lambda: K.nearest_foreground(gt, use_numba=nb)),
        "filter2d_zero": lambda nb: (lambda: K.filter2d_zero(prob, kernel, use_numba=nb)),
        "threshold_counts": lambda nb: (lambda: K.threshold_counts(prob, gt, thresholds, use_numba=nb)),
    }
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}  match")
    for name, make in cases.items():
        t_np, out_np = _time(make(False), args.repeats)
        if _accel.HAVE_NUMBA:
            t_nb, out_nb = _time(make(True), args.repeats)
            pairs = zip(out_np, out_nb) if isinstance(out_np, tuple) else [(out_np, out_nb)]
            same = all(np.allclose(a, b, rtol=0, atol=1e-12) for a, b in pairs)
            print(f"{name:<22}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.1f}  {same}")
        else:
            print(f"{name:<22}{t_np * 1e3:>12.3f}{'n/a':>12}{'':>10}")

    t, _ = _time(lambda: (e_measure_mean(prob, gt), weighted_fbeta(prob, gt)), args.repeats)
    print(f"\nE-measure + weighted F per frame (default backend): {t * 1e3:.3f} ms")


if __name__ == "__main__":
    main()
