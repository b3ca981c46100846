"""Wall-clock comparison of the numba and numpy time-stepping kernels.

    python3 benchmarks/bench_kernels.py [--steps 2000] [--cells 50 200 800]

Both backends run the same noisy two-sided book; the script also reports the
largest absolute difference between their paths.
"""
import argparse
import time

import numpy as np

from lobstefan import _kernels


def _inputs(n_cells, n_steps, seed=0):
    dx = 0.05
    dt = 0.4 * dx * dx
    x = dx * np.arange(1, n_cells + 1)
    rng = np.random.default_rng(seed)
    amp = x ** 1.6 / (1 + x * x) / dx
    noise = rng.normal(0.0, np.sqrt(dt * dx), size=(2, n_steps, n_cells)) * amp
    ask0 = 3 * x * np.exp(-1.5 * x)
    bid0 = 2 * x * np.exp(-x)
    return (ask0, bid0, 0.0, 0.4, 0.4, noise[0], noise[1], dx, dt, 2.0, 1e6, n_steps)


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--cells", type=int, nargs="+", default=[50, 200, 800])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if _kernels.run_book_nb is None:
        raise SystemExit("numba not importable; nothing to compare")

    # compile outside the timed region
    _kernels.run_book(*_inputs(8, 2), backend="numba")

    print(f"{'cells':>6} {'steps':>6} {'numpy s':>10} {'numba s':>10} {'speedup':>8} {'max |diff|':>11}")
    for n in args.cells:
        a = _inputs(n, args.steps)
        t_np, out_np = _best_of(lambda: _kernels.run_book(*a, backend="numpy"), args.repeat)
        t_nb, out_nb = _best_of(lambda: _kernels.run_book(*a, backend="numba"), args.repeat)
        diff = max(float(np.max(np.abs(u - v))) for u, v in zip(out_np[:3], out_nb[:3]))
        print(f"{n:>6} {args.steps:>6} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>8.1f} {diff:>11.3g}")


if __name__ == "__main__":
    main()
