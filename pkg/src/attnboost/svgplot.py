"""Dependency-free SVG scatter plots with dashed regression lines.

One plot per task-set group: x is the varied property (size shown on a
log2 axis), y the accuracy change against the baseline network.  In-set
results render as filled circles, out-of-set as open squares; the
fitted regression lines are dashed.  Output is plain SVG markup, valid
XML, with classed elements so tests can read geometry back.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 360
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 16, 34, 46

STYLE = {
    "in_set": ("#1f6fb2", "circle"),
    "out_of_set": ("#c05020", "square"),
}


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / max(n - 1, 1)))
    for mult in (1, 2, 2.5, 5, 10):
        if span / (step * mult) <= n - 1:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * max(1.0, abs(hi)):
        ticks.append(round(t, 12))
        t += step
    return ticks


class _Axes:
    def __init__(self, xs, ys):
        pad_x = 0.05 * (max(xs) - min(xs) or 1.0)
        pad_y = 0.08 * (max(ys) - min(ys) or 1.0)
        self.x_lo, self.x_hi = min(xs) - pad_x, max(xs) + pad_x
        self.y_lo, self.y_hi = min(ys) - pad_y, max(ys) + pad_y

    def px(self, x: float) -> float:
        t = (x - self.x_lo) / (self.x_hi - self.x_lo)
        return MARGIN_L + t * (WIDTH - MARGIN_L - MARGIN_R)

    def py(self, y: float) -> float:
        t = (y - self.y_lo) / (self.y_hi - self.y_lo)
        return HEIGHT - MARGIN_B - t * (HEIGHT - MARGIN_T - MARGIN_B)


def render_group_plot(xs, in_deltas, out_deltas, regressions, title, xlabel) -> str:
    """Build one SVG document.

    ``regressions`` maps side name to (beta0, beta1) in data space; the
    dashed line spans the x range of the data.
    """
    ys = list(in_deltas) + list(out_deltas) + [0.0]
    for beta0, beta1 in regressions.values():
        ys += [beta0 + beta1 * min(xs), beta0 + beta1 * max(xs)]
    ax = _Axes(xs, ys)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{escape(title)}</text>',
    ]

    x0, y0 = ax.px(ax.x_lo), ax.py(ax.y_lo)
    x1, y1 = ax.px(ax.x_hi), ax.py(ax.y_hi)
    parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y0:.2f}" stroke="#333"/>')
    parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x0:.2f}" y2="{y1:.2f}" stroke="#333"/>')

    for t in _nice_ticks(ax.x_lo, ax.x_hi):
        px = ax.px(t)
        parts.append(f'<line x1="{px:.2f}" y1="{y0:.2f}" x2="{px:.2f}" y2="{y0 + 4:.2f}" stroke="#333"/>')
        parts.append(f'<text x="{px:.2f}" y="{y0 + 17:.2f}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{t:g}</text>')
    for t in _nice_ticks(ax.y_lo, ax.y_hi):
        py = ax.py(t)
        parts.append(f'<line x1="{x0 - 4:.2f}" y1="{py:.2f}" x2="{x0:.2f}" y2="{py:.2f}" stroke="#333"/>')
        parts.append(f'<text x="{x0 - 7:.2f}" y="{py + 3:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{t:g}</text>')

    zero_py = ax.py(0.0)
    parts.append(f'<line class="zero-line" x1="{x0:.2f}" y1="{zero_py:.2f}" '
                 f'x2="{x1:.2f}" y2="{zero_py:.2f}" stroke="#bbb" stroke-dasharray="2,3"/>')

    for side, (beta0, beta1) in regressions.items():
        colour, _ = STYLE[side]
        xa, xb = min(xs), max(xs)
        parts.append(
            f'<line class="reg-{side}" x1="{ax.px(xa):.3f}" y1="{ax.py(beta0 + beta1 * xa):.3f}" '
            f'x2="{ax.px(xb):.3f}" y2="{ax.py(beta0 + beta1 * xb):.3f}" '
            f'stroke="{colour}" stroke-width="1.5" stroke-dasharray="6,4"/>')

    for side, deltas in (("in_set", in_deltas), ("out_of_set", out_deltas)):
        colour, glyph = STYLE[side]
        for x, y in zip(xs, deltas):
            cx, cy = ax.px(x), ax.py(y)
            if glyph == "circle":
                parts.append(f'<circle class="pt-{side}" cx="{cx:.3f}" cy="{cy:.3f}" '
                             f'r="3.2" fill="{colour}" fill-opacity="0.75"/>')
            else:
                parts.append(f'<rect class="pt-{side}" x="{cx - 2.8:.3f}" y="{cy - 2.8:.3f}" '
                             f'width="5.6" height="5.6" fill="none" stroke="{colour}"/>')

    parts.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">accuracy change</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
