"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
checked for agreement between the two backends before it is timed.
"""
import argparse
import time

import numpy as np

from dpcreg import _fallback

try:
    from dpcreg import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng, n=128, batch=8):
    z = rng.normal(size=(batch * n, n)) + 1j * rng.normal(size=(batch * n, n))
    img = rng.random((batch, n, n))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    # the raw kernels take sample points flattened to (B, P)
    xs = (xx + rng.uniform(-3, 3, (batch, n, n))).reshape(batch, -1)
    ys = (yy + rng.uniform(-3, 3, (batch, n, n))).reshape(batch, -1)
    grad = rng.normal(size=(batch, n * n))
    return {
        "fft_rows": lambda m: m.fft_rows(z, False),
        "bilinear_gather": lambda m: m.bilinear_gather(img, xs, ys),
        "bilinear_scatter": lambda m: m.bilinear_scatter(grad, xs, ys, n, n),
        "bilinear_coord_grad": lambda m: m.bilinear_coord_grad(img, xs, ys, grad),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, call in cases(rng, args.size).items():
        t_py = _time(lambda: call(_fallback), args.repeat)
        if _kernels is None:
            print(f"{name:<22}{1e3 * t_py:12.2f}{'n/a':>12}{'':>10}")
            continue
        a, b = call(_fallback), call(_kernels)
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            if not np.allclose(x, y, atol=1e-9):
                raise SystemExit(f"{name}: backends disagree")
        t_cy = _time(lambda: call(_kernels), args.repeat)
        print(f"{name:<22}{1e3 * t_py:12.2f}{1e3 * t_cy:12.2f}{t_py / t_cy:10.1f}x")


if __name__ == "__main__":
    main()
