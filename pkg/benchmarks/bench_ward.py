"""Benchmark the compiled Ward linkage kernel against the pure-numpy fallback.

Usage: python3 benchmarks/bench_ward.py [--sizes 200,500,1000] [--dim 128] [--repeats 3]

Also cross-checks that both backends produce identical merge sequences and,
when scipy is available, times scipy.cluster.hierarchy.linkage for context
(scipy reports sqrt(2 * cost) distances, so only timing is compared).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from asdkit.pseudolabel import HAVE_FAST_WARD, agglomerate


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="200,500,1000")
    parser.add_argument("--dim", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if not HAVE_FAST_WARD:
        print("note: compiled kernel not built, benchmarking the fallback only")

    try:
        from scipy.cluster.hierarchy import linkage as scipy_linkage
    except ImportError:
        scipy_linkage = None

    rng = np.random.default_rng(0)
    header = f"{'n':>6} {'dim':>4} {'python':>10} {'compiled':>10} {'speedup':>8} {'scipy':>10}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        x = rng.normal(size=(n, args.dim))
        t_py = _time(lambda: agglomerate(x, backend="python"), args.repeats)
        if HAVE_FAST_WARD:
            t_fast = _time(lambda: agglomerate(x, backend="fast"), args.repeats)
            assert agglomerate(x, backend="fast") == agglomerate(x, backend="python"), \
                "backends disagree"
            fast_txt = f"{t_fast * 1e3:9.1f}ms"
            speedup = f"{t_py / t_fast:7.1f}x"
        else:
            fast_txt, speedup = "n/a".rjust(10), "-".rjust(8)
        scipy_txt = "n/a".rjust(10)
        if scipy_linkage is not None:
            t_scipy = _time(lambda: scipy_linkage(x, method="ward"), args.repeats)
            scipy_txt = f"{t_scipy * 1e3:9.1f}ms"
        print(f"{n:>6} {args.dim:>4} {t_py * 1e3:9.1f}ms {fast_txt} {speedup} {scipy_txt}")


if __name__ == "__main__":
    main()
