"""Minimal deterministic SVG line charts (polylines and text only).

Numbers are written with fixed precision so identical inputs give identical
bytes.  Text elements may carry the exact value they display in a
``data-value`` attribute, which lets tests compare labels to library output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape, quoteattr

import numpy as np

WIDTH, HEIGHT = 480, 400
MARGIN = dict(left=60, right=20, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f", "#000000")


@dataclass
class Series:
    name: str
    x: np.ndarray
    y: np.ndarray
    dashed: bool = False


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    xlim: tuple = (0.0, 1.0)
    ylim: tuple = (0.0, 1.0)
    series: list = field(default_factory=list)
    notes: list = field(default_factory=list)  # (text, exact value or None)

    def add(self, name, x, y, dashed=False):
        self.series.append(Series(name, np.asarray(x, dtype=float), np.asarray(y, dtype=float), dashed))

    def note(self, text, value=None):
        self.notes.append((text, value))


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render(chart: Chart) -> str:
    x0, x1 = chart.xlim
    y0, y1 = chart.ylim
    if not (x1 > x0 and y1 > y0):
        raise ValueError("chart limits must be increasing")
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (np.clip(x, x0, x1) - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + ph - (np.clip(y, y0, y1) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="13">{escape(chart.title)}</text>',
        f'<text x="{MARGIN["left"] + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(chart.xlabel)}</text>',
        f'<text x="14" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MARGIN["top"] + ph / 2:.2f})">{escape(chart.ylabel)}</text>',
    ]
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{_fmt(px(xv))}" y="{MARGIN["top"] + ph + 16}" text-anchor="middle">{xv:.2f}</text>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end">{yv:.2f}</text>')
    for i, s in enumerate(chart.series):
        colour = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(s.x), py(s.y)))
        dash = ' stroke-dasharray="5,4"' if s.dashed else ""
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash} points="{pts}"/>')
        ly = MARGIN["top"] + 14 + 14 * i
        out.append(f'<text x="{WIDTH - MARGIN["right"] - 6}" y="{ly}" text-anchor="end" fill="{colour}">{escape(s.name)}</text>')
    for j, (text, value) in enumerate(chart.notes):
        attr = "" if value is None else f" data-value={quoteattr(repr(float(value)))}"
        ny = MARGIN["top"] + ph - 8 - 14 * (len(chart.notes) - 1 - j)
        out.append(f'<text x="{MARGIN["left"] + pw - 6}" y="{ny}" text-anchor="end"{attr}>{escape(text)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
