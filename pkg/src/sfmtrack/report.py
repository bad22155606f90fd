"""Deterministic SVG precision/success plots.

Each tracker becomes one <polyline> whose points are written in data units
(threshold,value) with exactly the number formatting of the curve CSVs; a group
transform maps data units onto the canvas.
"""

from __future__ import annotations

from typing import Mapping
from xml.sax.saxutils import escape

from .metrics import Curve, EvalResult, rank

WIDTH, HEIGHT = 640, 420
MARGIN = 60
PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _fmt(v: float) -> str:
    return repr(float(v))


def curve_points(curve: Curve) -> str:
    return " ".join(f"{_fmt(t)},{_fmt(v)}" for t, v in zip(curve.thresholds, curve.values))


def _legend_label(name: str, score: float, key: str) -> str:
    return f"{name} [{key.upper()} {score:.3f}]"


def plot_svg(curves: Mapping[str, Curve], order: list[str], scores: Mapping[str, float],
             key: str, title: str, xlabel: str) -> str:
    xs = [t for c in curves.values() for t in c.thresholds]
    x0, x1 = min(xs), max(xs)
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
    sx = pw / (x1 - x0) if x1 > x0 else 1.0
    sy = ph
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
        f'<text x="{WIDTH // 2}" y="{MARGIN // 2}" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 15}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
    ]
    for k in range(6):
        v = k / 5
        y = MARGIN + ph - v * ph
        out.append(f'<text x="{MARGIN - 8}" y="{y:.1f}" text-anchor="end" font-size="10">{v:.1f}</text>')
    for k in range(6):
        t = x0 + (x1 - x0) * k / 5
        x = MARGIN + (t - x0) * sx
        out.append(f'<text x="{x:.1f}" y="{MARGIN + ph + 14}" text-anchor="middle" font-size="10">{t:g}</text>')
    # data-space group: x right, y up
    out.append(
        f'<g transform="translate({MARGIN} {MARGIN + ph}) scale({sx!r} {-sy!r}) translate({-x0!r} 0)">'
    )
    for i, name in enumerate(order):
        color = PALETTE[i % len(PALETTE)]
        out.append(
            f'<polyline data-tracker="{escape(name)}" fill="none" stroke="{color}" '
            f'stroke-width="2" vector-effect="non-scaling-stroke" points="{curve_points(curves[name])}"/>'
        )
    out.append("</g>")
    for i, name in enumerate(order):
        color = PALETTE[i % len(PALETTE)]
        y = MARGIN + 16 + 16 * i
        out.append(f'<line x1="{MARGIN + pw - 190}" y1="{y - 4}" x2="{MARGIN + pw - 170}" y2="{y - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{MARGIN + pw - 165}" y="{y}" font-size="11">'
                   f'{escape(_legend_label(name, scores[name], key))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render(evals: Mapping[str, EvalResult]) -> dict[str, str]:
    """File name -> text for both plots and their curve CSVs."""
    files: dict[str, str] = {}
    for kind, key, title, xlabel in (
        ("precision", "prc", "Precision plots of OPE", "Location error threshold (pixels)"),
        ("success", "auc", "Success plots of OPE", "Overlap threshold"),
    ):
        order = rank(evals, key)
        curves = {n: getattr(evals[n].aggregate, kind) for n in order}
        scores = {n: getattr(evals[n], key) for n in order}
        files[f"{kind}.svg"] = plot_svg(curves, order, scores, key, title, xlabel)
        for n in order:
            files[f"{kind}_{n}.csv"] = curves[n].to_csv()
    return files
