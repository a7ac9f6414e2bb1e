"""Benchmark: JIT-compiled kernels against the pure-numpy fallbacks.

Times the hot paths on realistic workloads (per-plot metric extraction
over many units, terrain normalization over a large echo cloud) and
prints a side-by-side table.  Run directly:

    python benchmarks/bench_kernels.py [--units 2000] [--echoes-per-unit 600]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from harvmap import _kernels


def timed(func, *args, repeats=5):
    func(*args)  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        func(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_metric_stack(n_units: int, echoes_per_unit: int, seed: int = 1):
    rng = np.random.default_rng(seed)
    unit_heights = [
        np.sort(rng.gamma(shape=3.0, scale=4.0, size=echoes_per_unit)) for _ in range(n_units)
    ]
    fractions = np.array([0.10, 0.25, 0.50, 0.75, 0.95])

    def run(mean_var, percentiles_sorted, count_above):
        total = 0.0
        for z in unit_heights:
            mean, var = mean_var(z)
            pct = percentiles_sorted(z, fractions)
            total += mean + var + float(pct[4]) + count_above(z, 2.0)
        return total

    rows = []
    rows.append(
        (
            "per-unit metrics",
            f"{n_units} units x {echoes_per_unit} echoes",
            timed(run, _kernels.mean_var_numpy, _kernels.percentiles_sorted_numpy,
                  _kernels.count_above_numpy),
            timed(run, _kernels.mean_var_numba, _kernels.percentiles_sorted_numba,
                  _kernels.count_above_numba)
            if _kernels.NUMBA_AVAILABLE
            else None,
        )
    )
    return rows


def bench_normalization(n_echoes: int, seed: int = 2):
    rng = np.random.default_rng(seed)
    grid = rng.uniform(80, 120, size=(1000, 1000))
    xs = rng.uniform(0, 999, n_echoes)
    ys = rng.uniform(0, 999, n_echoes)

    rows = [
        (
            "bilinear terrain sampling",
            f"{n_echoes} echoes on a 1000x1000 grid",
            timed(_kernels.bilinear_numpy, grid, 0.0, 0.0, 1.0, -9999.0, xs, ys),
            timed(_kernels.bilinear_numba, grid, 0.0, 0.0, 1.0, -9999.0, xs, ys)
            if _kernels.NUMBA_AVAILABLE
            else None,
        ),
        (
            "point-in-circle clipping",
            f"{n_echoes} echoes",
            timed(_kernels.in_circle_numpy, xs, ys, 500.0, 500.0, 50.0),
            timed(_kernels.in_circle_numba, xs, ys, 500.0, 500.0, 50.0)
            if _kernels.NUMBA_AVAILABLE
            else None,
        ),
        (
            "compensated sum",
            f"{n_echoes} values",
            timed(_kernels.kahan_sum_numpy, xs),
            timed(_kernels.kahan_sum_numba, xs) if _kernels.NUMBA_AVAILABLE else None,
        ),
    ]
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--units", type=int, default=2000)
    parser.add_argument("--echoes-per-unit", type=int, default=600)
    parser.add_argument("--echoes", type=int, default=2_000_000)
    args = parser.parse_args()

    if not _kernels.NUMBA_AVAILABLE:
        print("numba is not importable; timing the numpy fallback only\n")

    rows = bench_metric_stack(args.units, args.echoes_per_unit)
    rows += bench_normalization(args.echoes)

    print(f"{'kernel':<28} {'workload':<38} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, workload, t_numpy, t_numba in rows:
        if t_numba is None:
            print(f"{name:<28} {workload:<38} {t_numpy * 1e3:>8.1f}ms {'-':>10} {'-':>8}")
        else:
            print(
                f"{name:<28} {workload:<38} {t_numpy * 1e3:>8.1f}ms "
                f"{t_numba * 1e3:>8.1f}ms {t_numpy / t_numba:>7.1f}x"
            )


if __name__ == "__main__":
    main()
