"""Dependency-free SVG chart of KSD against N."""

from __future__ import annotations

import math
from collections import defaultdict
from statistics import median
from xml.sax.saxutils import escape

from .errors import ConfigError

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 150, "top": 30, "bottom": 55}
# colour-blind friendly palette, cycled by method order of first appearance
PALETTE = ("#0072B2", "#D55E00", "#009E73", "#CC79A7", "#E69F00", "#56B4E9", "#000000")


def _num(x: float) -> str:
    return format(x, ".2f")


def ksd_vs_n_svg(records, title: str | None = None) -> str:
    """Render successful records as one median polyline per method plus per-seed markers.

    The KSD axis is logarithmic.  Output depends only on the records, so the
    same input always yields the same bytes.
    """
    ok = [r for r in records if r.status == "ok" and math.isfinite(r.ksd) and r.ksd > 0]
    if not ok:
        raise ConfigError("no successful records to plot")
    methods: list[str] = []
    for r in ok:
        if r.method not in methods:
            methods.append(r.method)
    by_cell: dict[tuple[str, int], list[float]] = defaultdict(list)
    for r in ok:
        by_cell[(r.method, r.N)].append(r.ksd)
    ns = sorted({r.N for r in ok})

    lo = math.floor(math.log10(min(r.ksd for r in ok)))
    hi = math.ceil(math.log10(max(r.ksd for r in ok)))
    if hi == lo:
        hi += 1
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    n_lo, n_hi = ns[0], ns[-1]

    def px(n):
        if n_hi == n_lo:
            return (x0 + x1) / 2
        return x0 + (n - n_lo) / (n_hi - n_lo) * (x1 - x0)

    def py(v):
        return y0 + (math.log10(v) - lo) / (hi - lo) * (y1 - y0)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_num((x0 + x1) / 2)}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for n in ns:
        x = _num(px(n))
        out.append(f'<line x1="{x}" y1="{y0}" x2="{x}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text class="xtick" x="{x}" y="{y0 + 18}" text-anchor="middle">{n}</text>')
    for e in range(lo, hi + 1):
        y = _num(py(10.0**e))
        out.append(f'<line x1="{x0 - 5}" y1="{y}" x2="{x1}" y2="{y}" stroke="#dddddd"/>')
        out.append(f'<text class="ytick" x="{x0 - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">1e{e}</text>')
    out.append(f'<text x="{_num((x0 + x1) / 2)}" y="{HEIGHT - 12}" text-anchor="middle">N (number of points)</text>')
    out.append(
        f'<text x="16" y="{_num((y0 + y1) / 2)}" text-anchor="middle" transform="rotate(-90 16 {_num((y0 + y1) / 2)})">KSD (log scale)</text>'
    )

    for i, m in enumerate(methods):
        colour = PALETTE[i % len(PALETTE)]
        cells = [(n, by_cell[(m, n)]) for n in ns if (m, n) in by_cell]
        pts = " ".join(f"{_num(px(n))},{_num(py(median(v)))}" for n, v in cells)
        out.append(f'<polyline data-method="{escape(m)}" points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        for n, vals in cells:
            for v in sorted(vals):
                out.append(f'<circle cx="{_num(px(n))}" cy="{_num(py(v))}" r="2.5" fill="{colour}" fill-opacity="0.5"/>')
        ly = MARGIN["top"] + 20 * i + 10
        out.append(f'<line x1="{x1 + 15}" y1="{ly}" x2="{x1 + 40}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 46}" y="{ly}" dominant-baseline="middle">{escape(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
