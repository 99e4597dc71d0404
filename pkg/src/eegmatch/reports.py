"""Deterministic run artifacts: manifests, CSV tables, and SVG charts.

Every command writes a manifest (resolved config, seeds, input content
hashes) before any result file.  CSV and JSON writers use fixed column
order, '\\n' newlines, and shortest round-trip float formatting so reruns
with identical configs produce byte-identical files.  Charts are plain
hand-assembled SVG — no timestamps, no random ids — so they are
reproducible and parseable by structure.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from eegmatch.errors import ValidationError

__all__ = [
    "file_sha256", "write_manifest", "write_rows_csv", "read_rows_csv",
    "write_summary_json", "svg_bar_chart", "svg_line_chart",
]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def write_manifest(out_dir, command: str, config: dict,
                   inputs: Optional[Dict[str, str]] = None) -> Path:
    """Write manifest.json (resolved config + input hashes) before results."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "inputs": {
            name: {"path": str(path), "sha256": file_sha256(path)}
            for name, path in sorted((inputs or {}).items())
        },
        "schema": 1,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def write_rows_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    """Write dict rows with a fixed column order and '\\n' line endings."""
    path = Path(path)
    for i, row in enumerate(rows):
        missing = [c for c in columns if c not in row]
        if missing:
            raise ValidationError(f"row {i} is missing columns {missing}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row[c]) for c in columns])
    return path


def read_rows_csv(path) -> Tuple[List[str], List[Dict[str, str]]]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"empty CSV file: {path}") from None
        rows = [dict(zip(header, row)) for row in reader]
    return header, rows


def write_summary_json(path, summary: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


# -- SVG charts ---------------------------------------------------------------------
#
# Fixed geometry: a 640x400 canvas with a margin box; the plot area maps
# values linearly.  Bars carry their value both as geometry and as a text
# label, so a parser can recover the plotted numbers from the rect heights
# alone (the render-then-parse oracle in the tests does exactly that).

_W, _H = 640, 400
_MARGIN = {"left": 60, "right": 20, "top": 40, "bottom": 60}


def _esc(s: str) -> str:
    return (str(s).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;").replace('"', "&quot;"))


def _fmt(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".")


def _svg_open(title: str) -> List[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<title>{_esc(title)}</title>',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{_esc(title)}</text>',
    ]


def _axes(y_max: float, y_label: str) -> List[str]:
    left, top = _MARGIN["left"], _MARGIN["top"]
    bottom = _H - _MARGIN["bottom"]
    right = _W - _MARGIN["right"]
    parts = [
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<text x="16" y="{(top + bottom) / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {(top + bottom) / 2})">'
        f'{_esc(y_label)}</text>',
    ]
    for i in range(5):
        frac = i / 4
        y = bottom - frac * (bottom - top)
        parts.append(f'<line x1="{left - 4}" y1="{_fmt(y)}" x2="{left}" '
                     f'y2="{_fmt(y)}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{_fmt(y + 4)}" text-anchor="end" '
                     f'font-size="10" font-family="sans-serif">'
                     f'{_fmt(frac * y_max)}</text>')
    return parts


def svg_bar_chart(path, labels: Sequence[str], values: Sequence[float],
                  title: str, y_label: str = "accuracy",
                  y_max: float = 1.0) -> Path:
    """One bar per (label, value); bar height encodes value / y_max."""
    if len(labels) != len(values):
        raise ValidationError("labels and values must have equal length")
    if not labels:
        raise ValidationError("bar chart needs at least one value")
    if y_max <= 0:
        raise ValidationError("y_max must be positive")
    for v in values:
        if not 0 <= v <= y_max:
            raise ValidationError(f"bar value {v} outside [0, {y_max}]")
    left, top = _MARGIN["left"], _MARGIN["top"]
    bottom = _H - _MARGIN["bottom"]
    span = _W - _MARGIN["left"] - _MARGIN["right"]
    slot = span / len(labels)
    bar_w = slot * 0.7
    parts = _svg_open(title) + _axes(y_max, y_label)
    for i, (label, value) in enumerate(zip(labels, values)):
        x = left + i * slot + (slot - bar_w) / 2
        h = (value / y_max) * (bottom - top)
        y = bottom - h
        parts.append(
            f'<rect class="bar" x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w)}" '
            f'height="{_fmt(h)}" fill="#4878a8"/>')
        parts.append(
            f'<text x="{_fmt(x + bar_w / 2)}" y="{_fmt(y - 4)}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{_fmt(value)}</text>')
        parts.append(
            f'<text x="{_fmt(x + bar_w / 2)}" y="{bottom + 14}" text-anchor="middle" '
            f'font-size="9" font-family="sans-serif">{_esc(label)}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path


def svg_line_chart(path, series: Dict[str, Sequence[Tuple[float, float]]],
                   title: str, x_label: str, y_label: str = "accuracy",
                   y_max: float = 1.0) -> Path:
    """One polyline + circle markers per named series; x scaled to data range."""
    if not series:
        raise ValidationError("line chart needs at least one series")
    xs = [x for pts in series.values() for x, _ in pts]
    if not xs:
        raise ValidationError("line chart needs at least one point")
    x_min, x_span = min(xs), max(max(xs) - min(xs), 1e-12)
    left, top = _MARGIN["left"], _MARGIN["top"]
    bottom = _H - _MARGIN["bottom"]
    right = _W - _MARGIN["right"]

    def sx(x: float) -> float:
        return left + (x - x_min) / x_span * (right - left)

    def sy(y: float) -> float:
        return bottom - (y / y_max) * (bottom - top)

    palette = ("#4878a8", "#a84848", "#48a868", "#a88a48")
    parts = _svg_open(title) + _axes(y_max, y_label)
    parts.append(
        f'<text x="{(left + right) / 2}" y="{_H - 16}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{_esc(x_label)}</text>')
    for x in sorted(set(xs)):
        parts.append(
            f'<text x="{_fmt(sx(x))}" y="{bottom + 14}" text-anchor="middle" '
            f'font-size="9" font-family="sans-serif">{_fmt(x)}</text>')
    for k, (name, pts) in enumerate(sorted(series.items())):
        color = palette[k % len(palette)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
        parts.append(f'<polyline class="series" fill="none" stroke="{color}" '
                     f'stroke-width="2" points="{coords}"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="3" '
                         f'fill="{color}"/>')
        parts.append(
            f'<text x="{right - 4}" y="{top + 14 + 14 * k}" text-anchor="end" '
            f'font-size="10" font-family="sans-serif" fill="{color}">'
            f'{_esc(name)}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path
