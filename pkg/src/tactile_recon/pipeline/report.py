"""Summary statistics, CSV helpers and a small standalone SVG line plot."""

from __future__ import annotations

import csv
import io
import math
from typing import Dict, Iterable, List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np


def quartiles(values: Iterable[float]) -> Tuple[float, float, float]:
    """``(q1, median, q3)`` by linear interpolation between order statistics; NaNs are ignored."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return (float("nan"),) * 3
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    return float(q1), float(med), float(q3)


def fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.9g}"


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


SUMMARY_COLUMNS = ("section", "metric", "group", "method", "n", "q1", "median", "q3")


def summary_rows(section: str, metric: str, groups: Dict[Tuple[str, str], List[float]]):
    """One row per ``(group, method)`` key with count and quartiles."""
    for (group, method) in sorted(groups):
        vals = groups[(group, method)]
        q1, med, q3 = quartiles(vals)
        n = sum(1 for x in vals if not math.isnan(x))
        yield [section, metric, group, method, str(n), q1, med, q3]


def summary_text(rows: Sequence[Sequence]) -> str:
    lines = []
    section = None
    for r in rows:
        if r[0] != section:
            section = r[0]
            lines.append(f"[{section}]")
        q1, med, q3 = (fmt(x) for x in r[5:8])
        lines.append(f"  {r[1]:<10} {r[2]:<22} {r[3]:<8} n={r[4]:<4} median={med} IQR=[{q1}, {q3}]")
    return "\n".join(lines) + "\n"


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def line_plot_svg(series: Dict[str, Sequence[Tuple[float, float]]], title: str, xlabel: str,
                  ylabel: str, width: int = 480, height: int = 320) -> str:
    """Polyline per named series; axes are linear and span the data."""
    pts = [p for s in series.values() for p in s if not math.isnan(p[1])]
    left, right, top, bottom = 60, 110, 30, 45
    if pts:
        xs, ys = zip(*pts)
        x0, x1 = min(xs), max(xs)
        y0, y1 = 0.0, max(ys)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 14}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{left - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(sorted(series.items())):
        colour = _COLOURS[i % len(_COLOURS)]
        good = [(x, y) for x, y in s if not math.isnan(y)]
        if good:
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 * (i + 1)
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
