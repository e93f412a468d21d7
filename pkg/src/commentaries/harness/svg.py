"""Small deterministic SVG 1.1 writers (line charts and heatmaps).

Numbers are formatted with fixed precision, so identical inputs give
identical bytes.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=55)


def _n(x: float) -> str:
    return f"{x:.2f}"


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * k / (count - 1) for k in range(count)]


def _label(v: float) -> str:
    return f"{v:.4g}"


def _frame(title: str, xlabel: str, ylabel: str, xr, yr) -> list[str]:
    l, r, t, b = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2 - 40}" y="22" font-size="14" text-anchor="middle">{escape(title)}</text>',
        f'<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>',
        f'<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>',
        f'<text x="{(l + r) / 2}" y="{HEIGHT - 15}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="18" y="{(t + b) / 2}" text-anchor="middle" transform="rotate(-90 18 {(t + b) / 2})">'
        f"{escape(ylabel)}</text>",
    ]
    for v in _ticks(*xr):
        x = _sx(v, xr)
        out.append(f'<line x1="{_n(x)}" y1="{b}" x2="{_n(x)}" y2="{b + 5}" stroke="black"/>')
        out.append(f'<text x="{_n(x)}" y="{b + 18}" text-anchor="middle">{_label(v)}</text>')
    for v in _ticks(*yr):
        y = _sy(v, yr)
        out.append(f'<line x1="{l - 5}" y1="{_n(y)}" x2="{l}" y2="{_n(y)}" stroke="black"/>')
        out.append(f'<text x="{l - 8}" y="{_n(y + 4)}" text-anchor="end">{_label(v)}</text>')
    return out


def _sx(v, xr):
    lo, hi = xr
    span = hi - lo or 1.0
    return MARGIN["left"] + (v - lo) / span * (WIDTH - MARGIN["left"] - MARGIN["right"])


def _sy(v, yr):
    lo, hi = yr
    span = hi - lo or 1.0
    return HEIGHT - MARGIN["bottom"] - (v - lo) / span * (HEIGHT - MARGIN["top"] - MARGIN["bottom"])


def _range(values) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return (0.0, 1.0)
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return (lo, hi)


def line_chart(series: list[dict], title: str, xlabel: str, ylabel: str) -> str:
    """``series`` items: {"label", "points": [(x, y)], "color", "width", "dash"}."""
    xs = [p[0] for s in series for p in s["points"]]
    ys = [p[1] for s in series for p in s["points"]]
    xr, yr = _range(xs), _range(ys)
    out = _frame(title, xlabel, ylabel, xr, yr)
    legend_y = MARGIN["top"]
    for s in series:
        pts = [(x, y) for x, y in s["points"] if math.isfinite(y)]
        if not pts:
            continue
        path = " ".join(f"{_n(_sx(x, xr))},{_n(_sy(y, yr))}" for x, y in pts)
        dash = ' stroke-dasharray="4,3"' if s.get("dash") else ""
        out.append(f'<polyline fill="none" stroke="{s["color"]}" stroke-width="{s.get("width", 1.0)}" '
                   f'stroke-opacity="{s.get("opacity", 1.0)}"{dash} points="{path}"/>')
        if s.get("label"):
            lx = WIDTH - MARGIN["right"] + 10
            out.append(f'<line x1="{lx}" y1="{legend_y}" x2="{lx + 18}" y2="{legend_y}" stroke="{s["color"]}" '
                       f'stroke-width="2"{dash}/>')
            out.append(f'<text x="{lx + 24}" y="{legend_y + 4}">{escape(s["label"])}</text>')
            legend_y += 16
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(grid: np.ndarray, title: str, xlabel: str, ylabel: str, lo: float, hi: float) -> str:
    grid = np.asarray(grid, dtype=float)
    rows, cols = grid.shape
    l, t = MARGIN["left"], MARGIN["top"]
    size = min((WIDTH - l - MARGIN["right"]) / cols, (HEIGHT - t - MARGIN["bottom"]) / rows)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2 - 40}" y="22" font-size="14" text-anchor="middle">{escape(title)}</text>',
    ]
    span = (hi - lo) or 1.0
    for i in range(rows):
        for j in range(cols):
            frac = min(max((grid[i, j] - lo) / span, 0.0), 1.0)
            shade = int(round(255 * (1 - frac)))
            out.append(f'<rect x="{_n(l + j * size)}" y="{_n(t + i * size)}" width="{_n(size)}" '
                       f'height="{_n(size)}" fill="rgb({shade},{shade},255)" stroke="white"/>')
            out.append(f'<text x="{_n(l + (j + 0.5) * size)}" y="{_n(t + (i + 0.5) * size + 4)}" '
                       f'text-anchor="middle" font-size="9">{grid[i, j]:.3f}</text>')
        out.append(f'<text x="{l - 6}" y="{_n(t + (i + 0.5) * size + 4)}" text-anchor="end">{i}</text>')
    for j in range(cols):
        out.append(f'<text x="{_n(l + (j + 0.5) * size)}" y="{_n(t + rows * size + 14)}" '
                   f'text-anchor="middle">{j}</text>')
    out.append(f'<text x="{_n(l + cols * size / 2)}" y="{_n(t + rows * size + 32)}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{_n(t + rows * size / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_n(t + rows * size / 2)})">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def metrics_chart(metrics, column: str = "val_loss") -> str:
    """Per-seed lines (thin) and the across-seed mean (thick) for every phase."""
    series = []
    for k, phase in enumerate(metrics.phases()):
        color = PALETTE[k % len(PALETTE)]
        per_seed = metrics.series(phase, column)
        for seed in sorted(per_seed):
            series.append({"points": per_seed[seed], "color": color, "width": 0.8, "opacity": 0.45})
        steps = sorted({s for pts in per_seed.values() for s, _ in pts})
        mean = []
        for s in steps:
            vals = [v for pts in per_seed.values() for st, v in pts if st == s and math.isfinite(v)]
            if vals:
                mean.append((s, float(np.mean(vals))))
        series.append({"label": f"{phase} (mean)", "points": mean, "color": color, "width": 2.5})
    return line_chart(series, f"{column} by step", "step", column)


def write_text(text: str, path) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
