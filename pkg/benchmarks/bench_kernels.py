"""Compare the numba and numpy sum-product kernel backends.

Run from the repository root:

    python benchmarks/bench_kernels.py [--rows 1024] [--repeats 5]

Prints per-shape timings for forward and backward along with the
speedup; asserts the two backends agree before timing anything.
"""

import argparse
import time

import numpy as np

from pinset import kernels

SHAPES = [
    (32, 32),
    (16, 16, 4),
    (16, 8, 8),
    (8, 8, 4, 4),
    (4, 4, 4, 4, 2, 2),
]


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=1024, help="set size N")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"rows={args.rows} repeats={args.repeats} (best-of timing)")
    header = f"{'shape':>18} {'numpy fwd':>11} {'numba fwd':>11} {'fwd x':>7} {'numpy bwd':>11} {'numba bwd':>11} {'bwd x':>7}"
    print(header)
    print("-" * len(header))

    for dims in SHAPES:
        factors = [rng.standard_normal((args.rows, c)) for c in dims]
        grad = rng.standard_normal(int(np.prod(dims)))

        kernels.set_backend("numba")
        fwd_numba = kernels.sum_product_forward(factors)  # includes JIT warmup
        kernels.sum_product_backward(factors, grad)
        kernels.set_backend("numpy")
        fwd_numpy = kernels.sum_product_forward(factors)
        np.testing.assert_allclose(fwd_numba, fwd_numpy, rtol=1e-10, atol=1e-12)

        times = {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            times[backend, "fwd"] = _time(
                lambda: kernels.sum_product_forward(factors), args.repeats
            )
            times[backend, "bwd"] = _time(
                lambda: kernels.sum_product_backward(factors, grad), args.repeats
            )

        fwd_speedup = times["numpy", "fwd"] / times["numba", "fwd"]
        bwd_speedup = times["numpy", "bwd"] / times["numba", "bwd"]
        print(
            f"{str(dims):>18} {times['numpy', 'fwd'] * 1e3:>9.3f}ms {times['numba', 'fwd'] * 1e3:>9.3f}ms "
            f"{fwd_speedup:>6.1f}x {times['numpy', 'bwd'] * 1e3:>9.3f}ms {times['numba', 'bwd'] * 1e3:>9.3f}ms "
            f"{bwd_speedup:>6.1f}x"
        )
    kernels.set_backend("numba")


if __name__ == "__main__":
    main()
