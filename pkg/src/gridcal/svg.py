"""Minimal deterministic SVG charts: histogram with density overlay, bars, heat map.

Output depends only on the inputs, so reruns are byte-identical.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 480, 320, 48


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _frame(title: str, body: list[str], width=WIDTH, height=HEIGHT) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    return "\n".join(head + body + ["</svg>", ""])


def _axes(x0, x1, y1, xlabel, ylabel) -> list[str]:
    w, h = WIDTH - 2 * PAD, HEIGHT - 2 * PAD
    return [
        f'<line x1="{PAD}" y1="{PAD + h}" x2="{PAD + w}" y2="{PAD + h}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{PAD + h}" stroke="black"/>',
        f'<text x="{PAD}" y="{PAD + h + 14}" text-anchor="middle">{x0:.3g}</text>',
        f'<text x="{PAD + w}" y="{PAD + h + 14}" text-anchor="middle">{x1:.3g}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end">{y1:.3g}</text>',
        f'<text x="{PAD + w / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="12" y="{PAD + h / 2}" transform="rotate(-90 12 {PAD + h / 2})" '
        f'text-anchor="middle">{escape(ylabel)}</text>',
    ]


def histogram(values, path, title: str, xlabel: str, bins: int = 20,
              value_range=None, density=None) -> None:
    """Density-normalized histogram; ``density`` is an optional callable drawn as a line."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = value_range if value_range is not None else (float(v.min()), float(v.max()))
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi), density=True)
    grid = np.linspace(lo, hi, 200)
    curve = density(grid) if density is not None else None
    top = max(counts.max(), curve.max() if curve is not None else 0.0, 1e-12) * 1.05
    w, h = WIDTH - 2 * PAD, HEIGHT - 2 * PAD

    def sx(x):
        return PAD + (x - lo) / (hi - lo) * w

    def sy(y):
        return PAD + h - y / top * h

    body = _axes(lo, hi, top, xlabel, "density")
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        body.append(f'<rect x="{_fmt(sx(a))}" y="{_fmt(sy(c))}" width="{_fmt(sx(b) - sx(a))}" '
                    f'height="{_fmt(sy(0) - sy(c))}" fill="#9ecae1" stroke="#3182bd"/>')
    if curve is not None:
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(grid, curve))
        body.append(f'<polyline points="{pts}" fill="none" stroke="#d62728" stroke-width="2"/>')
    Path(path).write_text(_frame(title, body))


def bars(labels, values, path, title: str, ylabel: str) -> None:
    vals = np.asarray(values, dtype=np.float64)
    finite = vals[np.isfinite(vals)]
    top = max(finite.max() if finite.size else 1.0, 1e-12) * 1.1
    w, h = WIDTH - 2 * PAD, HEIGHT - 2 * PAD
    step = w / max(len(vals), 1)
    body = _axes(0, len(vals), top, "", ylabel)[:2] + _axes(0, 1, top, "", ylabel)[4:5]
    for i, (lab, v) in enumerate(zip(labels, vals)):
        x = PAD + i * step + step * 0.1
        bh = 0.0 if not np.isfinite(v) else max(v, 0.0) / top * h
        body.append(f'<rect x="{_fmt(x)}" y="{_fmt(PAD + h - bh)}" width="{_fmt(step * 0.8)}" '
                    f'height="{_fmt(bh)}" fill="#74c476"/>')
        body.append(f'<text x="{_fmt(x + step * 0.4)}" y="{PAD + h + 14}" text-anchor="middle">'
                    f'{escape(str(lab))}</text>')
    Path(path).write_text(_frame(title, body))


def heatmap(grid, path, title: str, vmax: float | None = None) -> None:
    g = np.asarray(grid, dtype=np.float64)
    rows, cols = g.shape
    cell = min((WIDTH - 2 * PAD) / cols, (HEIGHT - 2 * PAD) / rows)
    top = vmax if vmax is not None else max(float(np.nanmax(g)) if g.size else 1.0, 1e-12)
    body = []
    for i in range(rows):
        for j in range(cols):
            t = 0.0 if not np.isfinite(g[i, j]) else min(max(g[i, j] / top, 0.0), 1.0)
            shade = int(round(255 * (1 - t)))
            body.append(f'<rect x="{_fmt(PAD + j * cell)}" y="{_fmt(PAD + i * cell)}" '
                        f'width="{_fmt(cell)}" height="{_fmt(cell)}" fill="rgb(255,{shade},{shade})"/>')
    body.append(f'<text x="{PAD}" y="{HEIGHT - 10}">max {top:.3g}</text>')
    Path(path).write_text(_frame(title, body))
