"""Compiled vs NumPy kernels on the two metric hot spots.

    python3 benchmarks/bench_kernels.py [--size 352] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from segunet._ext import fallback

try:
    from segunet._ext import _kernels
except ImportError:
    _kernels = None


def _inputs(size, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    g = (yy - size / 2) ** 2 / (size / 3) ** 2 + (xx - size / 2.5) ** 2 / (size / 4) ** 2 < 1
    p = np.clip(g * 0.7 + rng.random((size, size)) * 0.3, 0, 1)
    return np.floor(p * 255).astype(np.uint8), g


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=352)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    q, g = _inputs(args.size)
    backends = {"python": fallback}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<18} {'backend':<8} {'best ms':>9}")
    results = {}
    for kernel, call in (
        ("emeasure_curve", lambda m: m.emeasure_curve(q, g)),
        ("nearest_foreground", lambda m: m.nearest_foreground(g)),
    ):
        for name, mod in backends.items():
            best = min(timeit.repeat(lambda: call(mod), number=1, repeat=args.repeat)) * 1e3
            results[kernel, name] = best
            print(f"{kernel:<18} {name:<8} {best:9.2f}")
        if "cython" in backends:
            print(f"{kernel:<18} speedup  {results[kernel, 'python'] / results[kernel, 'cython']:8.1f}x")
    return results


if __name__ == "__main__":
    main()
