#!/usr/bin/env python3
"""Benchmark the compiled scan/conv kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from ssm_ptq import _kernels_py

try:
    from ssm_ptq import _kernels
except ImportError:
    _kernels = None

SCAN_SIZES = [
    ("toy", 64, 64, 8),
    ("small", 256, 512, 16),
    ("mamba-130m-ish", 512, 1536, 16),
]

CONV_SIZES = [
    ("toy", 64, 64, 4),
    ("small", 256, 512, 4),
    ("mamba-130m-ish", 512, 1536, 4),
]


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scan(repeats):
    print(f"{'selective_scan':<18} {'[T,E,S]':<18} {'python':>10} {'cython':>10} {'speedup':>8}")
    rng = np.random.default_rng(0)
    for name, t, e, s in SCAN_SIZES:
        a = rng.uniform(0.1, 0.99, (t, e, s)).astype(np.float32)
        b = rng.normal(0, 1, (t, e, s)).astype(np.float32)
        c = rng.normal(0, 1, (t, s)).astype(np.float32)
        u = rng.normal(0, 1, (t, e)).astype(np.float32)
        d = rng.normal(0, 1, e).astype(np.float32)
        t_py = _time(lambda: _kernels_py.selective_scan(a, b, c, u, d), repeats)
        if _kernels is None:
            print(f"{name:<18} {f'[{t},{e},{s}]':<18} {t_py * 1e3:>8.2f}ms {'n/a':>10} {'n/a':>8}")
            continue
        t_cy = _time(lambda: _kernels.selective_scan(a, b, c, u, d), repeats)
        y1, _ = _kernels.selective_scan(a, b, c, u, d)
        y2, _ = _kernels_py.selective_scan(a, b, c, u, d)
        assert np.array_equal(y1, y2), "backends diverged"
        print(
            f"{name:<18} {f'[{t},{e},{s}]':<18} {t_py * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms "
            f"{t_py / t_cy:>7.1f}x"
        )


def bench_conv(repeats):
    print(f"\n{'causal_conv1d':<18} {'[T,C,K]':<18} {'python':>10} {'cython':>10} {'speedup':>8}")
    rng = np.random.default_rng(1)
    for name, t, c, k in CONV_SIZES:
        x = rng.normal(0, 1, (t, c)).astype(np.float32)
        w = rng.normal(0, 1, (k, c)).astype(np.float32)
        t_py = _time(lambda: _kernels_py.causal_conv1d(x, w), repeats)
        if _kernels is None:
            print(f"{name:<18} {f'[{t},{c},{k}]':<18} {t_py * 1e3:>8.2f}ms {'n/a':>10} {'n/a':>8}")
            continue
        t_cy = _time(lambda: _kernels.causal_conv1d(x, w), repeats)
        assert np.array_equal(_kernels.causal_conv1d(x, w), _kernels_py.causal_conv1d(x, w))
        print(
            f"{name:<18} {f'[{t},{c},{k}]':<18} {t_py * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms "
            f"{t_py / t_cy:>7.1f}x"
        )


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if _kernels is None:
        print("compiled extension not available; timing the fallback only\n")
    bench_scan(args.repeats)
    bench_conv(args.repeats)
