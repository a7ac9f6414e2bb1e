"""Numeric hot-path kernels with optional JIT compilation.

The inner loops that dominate runtime on large echo sets (compensated
accumulation, order-statistic percentiles, bilinear terrain sampling,
point-in-circle tests) are compiled with numba when it is importable.
Setting the environment variable ``HARVMAP_NO_NUMBA`` to any non-empty
value selects the plain numpy implementations instead.

Both backends are individually deterministic (same inputs give
bit-identical outputs on every run and at every thread count) and agree
with each other to within a few ulps.  ``benchmarks/bench_kernels.py``
times the two paths side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = NUMBA_AVAILABLE and not os.environ.get("HARVMAP_NO_NUMBA")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# loop implementations (numba-compilable source)
# ---------------------------------------------------------------------------


def _kahan_sum_loop(values):
    total = 0.0
    comp = 0.0
    for i in range(values.shape[0]):
        y = values[i] - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def _mean_var_loop(values):
    n = values.shape[0]
    total = 0.0
    comp = 0.0
    for i in range(n):
        y = values[i] - comp
        t = total + y
        comp = (t - total) - y
        total = t
    mean = total / n
    if n < 2:
        return mean, 0.0
    sq = 0.0
    comp = 0.0
    for i in range(n):
        d = values[i] - mean
        y = d * d - comp
        t = sq + y
        comp = (t - sq) - y
        sq = t
    return mean, sq / (n - 1)


def _percentiles_sorted_loop(sorted_values, fractions):
    n = sorted_values.shape[0]
    out = np.empty(fractions.shape[0], dtype=np.float64)
    for j in range(fractions.shape[0]):
        rank = (n - 1) * fractions[j]
        lo = int(math.floor(rank))
        hi = int(math.ceil(rank))
        frac = rank - lo
        a = sorted_values[lo]
        b = sorted_values[hi]
        # two-sided difference form, clamped: exact at both ends and
        # monotone across fractions even for pathological magnitudes
        diff = b - a
        if frac < 0.5:
            value = a + frac * diff
        else:
            value = b - (1.0 - frac) * diff
        if value < a:
            value = a
        elif value > b:
            value = b
        out[j] = value
    return out


def _count_above_loop(values, threshold):
    count = 0
    for i in range(values.shape[0]):
        if values[i] > threshold:
            count += 1
    return count


def _bilinear_loop(grid, xll, yll, cell_size, nodata, xs, ys):
    nrows, ncols = grid.shape
    n = xs.shape[0]
    values = np.empty(n, dtype=np.float64)
    ok = np.empty(n, dtype=np.bool_)
    for i in range(n):
        # fractional index into the grid of cell centers; grid row 0 is the
        # southernmost row
        gx = (xs[i] - xll) / cell_size - 0.5
        gy = (ys[i] - yll) / cell_size - 0.5
        if gx < 0.0:
            gx = 0.0
        elif gx > ncols - 1:
            gx = float(ncols - 1)
        if gy < 0.0:
            gy = 0.0
        elif gy > nrows - 1:
            gy = float(nrows - 1)
        c0 = int(math.floor(gx))
        r0 = int(math.floor(gy))
        if c0 > ncols - 2:
            c0 = ncols - 2
        if r0 > nrows - 2:
            r0 = nrows - 2
        if ncols == 1:
            c0 = 0
        if nrows == 1:
            r0 = 0
        c1 = min(c0 + 1, ncols - 1)
        r1 = min(r0 + 1, nrows - 1)
        fx = gx - c0
        fy = gy - r0
        z00 = grid[r0, c0]
        z01 = grid[r0, c1]
        z10 = grid[r1, c0]
        z11 = grid[r1, c1]
        if z00 == nodata or z01 == nodata or z10 == nodata or z11 == nodata:
            values[i] = 0.0
            ok[i] = False
            continue
        top = z00 * (1.0 - fx) + z01 * fx
        bot = z10 * (1.0 - fx) + z11 * fx
        values[i] = top * (1.0 - fy) + bot * fy
        ok[i] = True
    return values, ok


def _in_circle_loop(xs, ys, cx, cy, radius):
    n = xs.shape[0]
    mask = np.empty(n, dtype=np.bool_)
    r2 = radius * radius
    for i in range(n):
        dx = xs[i] - cx
        dy = ys[i] - cy
        mask[i] = dx * dx + dy * dy <= r2
    return mask


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------


def _kahan_sum_numpy(values):
    # math.fsum is exactly rounded, hence order-independent and at least as
    # accurate as the compensated loop
    return math.fsum(values)


def _mean_var_numpy(values):
    n = values.shape[0]
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    d = values - mean
    return mean, math.fsum(d * d) / (n - 1)


def _percentiles_sorted_numpy(sorted_values, fractions):
    n = sorted_values.shape[0]
    rank = (n - 1) * np.asarray(fractions, dtype=np.float64)
    lo = np.floor(rank).astype(np.int64)
    hi = np.ceil(rank).astype(np.int64)
    frac = rank - lo
    a = sorted_values[lo]
    b = sorted_values[hi]
    diff = b - a
    values = np.where(frac < 0.5, a + frac * diff, b - (1.0 - frac) * diff)
    return np.clip(values, a, b)


def _count_above_numpy(values, threshold):
    return int(np.count_nonzero(values > threshold))


def _bilinear_numpy(grid, xll, yll, cell_size, nodata, xs, ys):
    nrows, ncols = grid.shape
    gx = np.clip((xs - xll) / cell_size - 0.5, 0.0, ncols - 1)
    gy = np.clip((ys - yll) / cell_size - 0.5, 0.0, nrows - 1)
    c0 = np.minimum(np.floor(gx).astype(np.int64), max(ncols - 2, 0))
    r0 = np.minimum(np.floor(gy).astype(np.int64), max(nrows - 2, 0))
    c1 = np.minimum(c0 + 1, ncols - 1)
    r1 = np.minimum(r0 + 1, nrows - 1)
    fx = gx - c0
    fy = gy - r0
    z00 = grid[r0, c0]
    z01 = grid[r0, c1]
    z10 = grid[r1, c0]
    z11 = grid[r1, c1]
    ok = (z00 != nodata) & (z01 != nodata) & (z10 != nodata) & (z11 != nodata)
    top = z00 * (1.0 - fx) + z01 * fx
    bot = z10 * (1.0 - fx) + z11 * fx
    values = np.where(ok, top * (1.0 - fy) + bot * fy, 0.0)
    return values, ok


def _in_circle_numpy(xs, ys, cx, cy, radius):
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:
    kahan_sum_numba = njit(cache=True)(_kahan_sum_loop)
    mean_var_numba = njit(cache=True)(_mean_var_loop)
    percentiles_sorted_numba = njit(cache=True)(_percentiles_sorted_loop)
    count_above_numba = njit(cache=True)(_count_above_loop)
    bilinear_numba = njit(cache=True)(_bilinear_loop)
    in_circle_numba = njit(cache=True)(_in_circle_loop)

if USE_NUMBA:
    kahan_sum = kahan_sum_numba
    mean_var = mean_var_numba
    percentiles_sorted = percentiles_sorted_numba
    count_above = count_above_numba
    bilinear = bilinear_numba
    in_circle = in_circle_numba
else:
    kahan_sum = _kahan_sum_numpy
    mean_var = _mean_var_numpy
    percentiles_sorted = _percentiles_sorted_numpy
    count_above = _count_above_numpy
    bilinear = _bilinear_numpy
    in_circle = _in_circle_numpy

kahan_sum_numpy = _kahan_sum_numpy
mean_var_numpy = _mean_var_numpy
percentiles_sorted_numpy = _percentiles_sorted_numpy
count_above_numpy = _count_above_numpy
bilinear_numpy = _bilinear_numpy
in_circle_numpy = _in_circle_numpy
