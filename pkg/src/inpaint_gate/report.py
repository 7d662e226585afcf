"""Byte-deterministic report emission: JSON, curve CSVs and static SVGs.

Identical inputs always produce identical bytes, so pipeline runs can be
compared with a plain file diff. SVG plots are self-contained and assume
unit-square curve data (recall/precision, fpr/tpr).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

Point = tuple[float, float]

SVG_WIDTH = 480
SVG_HEIGHT = 360
MARGIN_LEFT = 55
MARGIN_RIGHT = 15
MARGIN_TOP = 30
MARGIN_BOTTOM = 45


def render_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def render_csv(points: Sequence[Point]) -> str:
    lines = ["x,y"]
    for x, y in points:
        lines.append(f"{x!r},{y!r}")
    return "\n".join(lines) + "\n"


def _to_px(x: float, y: float) -> tuple[float, float]:
    plot_w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    return MARGIN_LEFT + x * plot_w, MARGIN_TOP + (1.0 - y) * plot_h


def render_svg(points: Sequence[Point], title: str, xlabel: str, ylabel: str) -> str:
    path = " ".join(f"{px:.2f},{py:.2f}" for px, py in (_to_px(x, y) for x, y in points))
    x0, y0 = _to_px(0.0, 0.0)
    x1, y1 = _to_px(1.0, 1.0)
    ticks = []
    for value in (0.0, 0.5, 1.0):
        tx, _ = _to_px(value, 0.0)
        _, ty = _to_px(0.0, value)
        ticks.append(
            f'<text x="{tx:.2f}" y="{y0 + 18:.2f}" font-size="11" text-anchor="middle">{value:g}</text>'
        )
        ticks.append(
            f'<text x="{x0 - 8:.2f}" y="{ty + 4:.2f}" font-size="11" text-anchor="end">{value:g}</text>'
        )
    tick_text = "\n  ".join(ticks)
    return f"""<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">
  <rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>
  <rect x="{x0:.2f}" y="{y1:.2f}" width="{x1 - x0:.2f}" height="{y0 - y1:.2f}" fill="none" stroke="#888" stroke-width="1"/>
  {tick_text}
  <text x="{(x0 + x1) / 2:.2f}" y="18" font-size="13" text-anchor="middle">{title}</text>
  <text x="{(x0 + x1) / 2:.2f}" y="{SVG_HEIGHT - 8}" font-size="12" text-anchor="middle">{xlabel}</text>
  <text x="14" y="{(y0 + y1) / 2:.2f}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {(y0 + y1) / 2:.2f})">{ylabel}</text>
  <polyline points="{path}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>
</svg>
"""


CURVE_LABELS = {
    "pr": ("recall", "precision"),
    "roc": ("false positive rate", "true positive rate"),
}


def emit_report(
    report: dict,
    curves: dict[str, list[Point]],
    out_dir: str | Path,
    formats: Iterable[str] = ("json",),
) -> list[Path]:
    """Write report.json plus per-curve CSV/SVG files; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats = set(formats)
    unknown = formats - {"json", "csv", "svg"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    written: list[Path] = []
    if "json" in formats:
        path = out / "report.json"
        path.write_text(render_json(report), encoding="utf-8")
        written.append(path)
    for name in sorted(curves):
        points = curves[name]
        kind = name.split("_", 1)[0]
        xlabel, ylabel = CURVE_LABELS.get(kind, ("x", "y"))
        if "csv" in formats:
            path = out / f"{name}.csv"
            path.write_text(render_csv(points), encoding="utf-8")
            written.append(path)
        if "svg" in formats:
            path = out / f"{name}.svg"
            path.write_text(render_svg(points, name, xlabel, ylabel), encoding="utf-8")
            written.append(path)
    return written
