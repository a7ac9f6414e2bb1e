"""Dependency-free SVG scatter plots for observed-versus-predicted checks.

Deliberately small: fixed canvas, nice-number axis ticks, one marker
color per series and a 1:1 reference line.  Output is deterministic
(fixed decimal formatting) so plots can take part in byte-identical
reruns.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

WIDTH = 640
HEIGHT = 480
MARGIN = 56
SERIES_COLORS = ("#1b7837", "#762a83", "#d95f02", "#386cb0", "#666666")


def _nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0, 1.0]
    if hi <= lo:
        hi = lo + 1.0
    raw_step = (hi - lo) / max(target - 1, 1)
    magnitude = 10.0 ** math.floor(math.log10(raw_step))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * magnitude
        if step >= raw_step:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _f(value: float) -> str:
    return f"{value:.2f}"


def scatter_svg(
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    xlabel: str,
    ylabel: str,
    title: str,
    identity_line: bool = True,
) -> str:
    """SVG text for labeled scatter series sharing one axis frame."""
    xs_all = [float(v) for xs, _ in series.values() for v in xs]
    ys_all = [float(v) for _, ys in series.values() for v in ys]
    if not xs_all:
        xs_all = ys_all = [0.0, 1.0]
    lo = min(min(xs_all), min(ys_all))
    hi = max(max(xs_all), max(ys_all))
    if hi == lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    span = hi - lo
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN

    def px(x: float) -> float:
        return MARGIN + (x - lo) / span * plot_w

    def py(y: float) -> float:
        return HEIGHT - MARGIN - (y - lo) / span * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
    ]
    # frame
    parts.append(
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333" stroke-width="1"/>'
    )
    for tick in _nice_ticks(lo, hi):
        if tick < lo or tick > hi:
            continue
        x = px(tick)
        y = py(tick)
        parts.append(
            f'<line x1="{_f(x)}" y1="{HEIGHT - MARGIN}" x2="{_f(x)}" '
            f'y2="{HEIGHT - MARGIN + 5}" stroke="#333"/>'
        )
        parts.append(
            f'<text x="{_f(x)}" y="{HEIGHT - MARGIN + 18}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{tick:g}</text>'
        )
        parts.append(
            f'<line x1="{MARGIN - 5}" y1="{_f(y)}" x2="{MARGIN}" y2="{_f(y)}" stroke="#333"/>'
        )
        parts.append(
            f'<text x="{MARGIN - 8}" y="{_f(y + 4)}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{tick:g}</text>'
        )
    if identity_line:
        parts.append(
            f'<line x1="{_f(px(lo))}" y1="{_f(py(lo))}" x2="{_f(px(hi))}" y2="{_f(py(hi))}" '
            'stroke="#999" stroke-dasharray="5,4"/>'
        )
    for index, (label, (xs, ys)) in enumerate(series.items()):
        color = SERIES_COLORS[index % len(SERIES_COLORS)]
        for x, y in zip(xs, ys):
            parts.append(
                f'<circle cx="{_f(px(float(x)))}" cy="{_f(py(float(y)))}" r="3" '
                f'fill="{color}" fill-opacity="0.6"/>'
            )
        ly = MARGIN + 16 + 16 * index
        parts.append(f'<circle cx="{MARGIN + 12}" cy="{ly - 4}" r="4" fill="{color}"/>')
        parts.append(
            f'<text x="{MARGIN + 22}" y="{ly}" font-size="12" '
            f'font-family="sans-serif">{label}</text>'
        )
    parts.append(
        f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-size="13" font-family="sans-serif">{xlabel}</text>'
    )
    parts.append(
        f'<text x="16" y="{HEIGHT / 2:.0f}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif" transform="rotate(-90 16 {HEIGHT / 2:.0f})">{ylabel}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
