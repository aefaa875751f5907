"""Minimal SVG line charts for curves and binned statistics."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def _ticks(lo, hi, log):
    if log:
        return [10.0 ** e for e in range(math.floor(math.log10(lo)), math.ceil(math.log10(hi)) + 1)]
    step = (hi - lo) / 4 or 1.0
    return [lo + i * step for i in range(5)]


def line_chart(series, title="", xlabel="", ylabel="", logx=False, logy=False, width=480, height=360):
    """Render ``{label: (xs, ys)}`` to an SVG document string.

    Non-positive values are dropped from log axes; NaNs are skipped.
    """
    pts = {}
    for label, (xs, ys) in series.items():
        keep = [
            (x, y) for x, y in zip(xs, ys)
            if math.isfinite(x) and math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)
        ]
        pts[label] = keep
    allx = [x for p in pts.values() for x, _ in p] or [1.0]
    ally = [y for p in pts.values() for _, y in p] or [1.0]
    fx = math.log10 if logx else float
    fy = math.log10 if logy else float
    x0, x1 = min(map(fx, allx)), max(map(fx, allx))
    y0, y1 = min(map(fy, ally)), max(map(fy, ally))
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    ml, mr, mt, mb = 60, 110, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (fx(x) - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (fy(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    lo_x, hi_x = (10 ** x0, 10 ** x1) if logx else (x0, x1)
    lo_y, hi_y = (10 ** y0, 10 ** y1) if logy else (y0, y1)
    for t in _ticks(lo_x, hi_x, logx):
        if lo_x - 1e-12 <= t <= hi_x + 1e-12:
            out.append(f'<text x="{sx(t):.1f}" y="{mt + ph + 14}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(lo_y, hi_y, logy):
        if lo_y - 1e-12 <= t <= hi_y + 1e-12:
            out.append(f'<text x="{ml - 4}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    for i, (label, p) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        if p:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = mt + 14 * i + 8
        out.append(f'<line x1="{ml + pw + 8}" y1="{ly}" x2="{ml + pw + 24}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 28}" y="{ly + 4}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg):
    with open(path, "w") as fh:
        fh.write(svg)
