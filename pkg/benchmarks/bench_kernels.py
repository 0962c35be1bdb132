"""Compare the compiled and numpy kernels on typical integrator sizes.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints per-kernel timings for both backends and the largest difference
between their outputs (the compensated kernels should agree bitwise or to
a few ulps).
"""

import argparse
import timeit

import numpy as np

from lorenz_atlas import _pykernels

try:
    from lorenz_atlas import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    M, N = 39, 24
    a = rng.standard_normal((M + 1, N + 1))
    b = rng.standard_normal((M + 1, N + 1))
    x0 = [rng.standard_normal((1, N + 1)) for _ in range(3)]
    A = rng.standard_normal((3 * (N + 1), 3 * (N + 1)))
    B = rng.standard_normal((3 * (N + 1), 3 * (N + 1)))
    yield "conv2_trunc", lambda k: k.conv2_trunc(a, b, M + 1, N + 1)
    yield "conv2_dot2", lambda k: k.conv2_dot2(a, b, 2 * M + 2, 2 * N + 1)
    yield "lorenz_taylor", lambda k: k.lorenz_taylor(*x0, M, 0.01, 10.0, 28.0, 8.0 / 3.0)
    yield "dot2_matmul", lambda k: k.dot2_matmul(A, B)


def _first(x):
    return np.asarray(x[0] if isinstance(x, tuple) else x)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(1)
    print(f"{'kernel':<16}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}{'max diff':>11}")
    for name, call in cases(rng):
        tp = min(timeit.repeat(lambda: call(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<16}{tp:>12.2f}{'n/a':>13}")
            continue
        tc = min(timeit.repeat(lambda: call(_ckernels), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(_first(call(_pykernels)) - _first(call(_ckernels)))))
        print(f"{name:<16}{tp:>12.2f}{tc:>13.2f}{tp / tc:>9.1f}{diff:>11.1e}")


if __name__ == "__main__":
    main()
