"""Deterministic CSV and dependency-free SVG line charts."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

from .checkpoint import atomic_write
from .errors import ContractError

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return format(v, ".6g")
    return str(v)


def _sort_key(row: dict, columns: Sequence[str]):
    key = []
    for c in columns:
        v = row.get(c)
        # numbers before strings before missing, so mixed columns still compare
        if v is None or (isinstance(v, float) and math.isnan(v)):
            key.append((2, 0, ""))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            key.append((0, v, ""))
        else:
            key.append((1, 0, str(v)))
    return key


def csv_text(rows: Iterable[dict], columns: Sequence[str] | None = None) -> str:
    """Header plus rows sorted on all columns left to right; floats at 6 significant digits."""
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ContractError("columns are required when rows are empty")
        columns = list(rows[0].keys())
    for r in rows:
        extra = set(r) - set(columns)
        if extra:
            raise ContractError(f"row has columns outside the schema: {sorted(extra)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in sorted(rows, key=lambda r: _sort_key(r, columns)):
        w.writerow([format_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(rows: Iterable[dict], path: str | os.PathLike, columns: Sequence[str] | None = None) -> Path:
    atomic_write(path, csv_text(rows, columns).encode("utf-8"))
    return Path(path)


def read_csv(path: str | os.PathLike) -> list[dict]:
    """Rows as dicts; numeric-looking cells become int or float, empty cells become None."""
    def conv(s: str):
        if s == "":
            return None
        try:
            return int(s)
        except ValueError:
            pass
        try:
            return float(s)
        except ValueError:
            return s

    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: conv(v) for k, v in r.items()} for r in csv.DictReader(fh)]


@dataclass(frozen=True)
class PlotSpec:
    """One line chart: ``y`` against ``x``, one line per distinct ``series`` value."""

    name: str
    x: str
    y: str
    series: str | None = None
    x_label: str | None = None
    y_label: str | None = None
    title: str | None = None


def _num(v) -> float | None:
    if v is None or isinstance(v, bool):
        return None
    try:
        f = float(v)
    except (TypeError, ValueError):
        return None
    return f if math.isfinite(f) else None


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def svg_text(rows: Sequence[dict], spec: PlotSpec, width: int = 640, height: int = 400) -> str:
    """Render a line chart. Rows whose ``y`` is missing break the line into separate segments."""
    groups: dict[str, list[tuple[float, float | None]]] = {}
    for r in rows:
        x = _num(r.get(spec.x))
        if x is None:
            continue
        label = format_cell(r.get(spec.series)) if spec.series else spec.y
        groups.setdefault(label, []).append((x, _num(r.get(spec.y))))
    xs = [x for pts in groups.values() for x, _ in pts]
    ys = [y for pts in groups.values() for _, y in pts if y is not None]
    if not xs:
        raise ContractError(f"no plottable rows for column {spec.x!r}")
    x0, x1 = min(xs), max(xs)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    ml, mr, mt, mb = 70, 150, 40, 50
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if spec.title:
        out.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">'
                   f'{escape(spec.title)}</text>')
    out.append(f'<line class="axis" x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>')
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.1f}" y="{mt + ph + 15}" text-anchor="middle">{format_cell(float(t))}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{ml - 5}" y="{py(t) + 4:.1f}" text-anchor="end">{format_cell(float(t))}</text>')
    out.append(f'<text class="x-label" x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">'
               f'{escape(spec.x_label or spec.x)}</text>')
    out.append(f'<text class="y-label" x="15" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {mt + ph / 2:.1f})">{escape(spec.y_label or spec.y)}</text>')
    for gi, label in enumerate(sorted(groups)):
        color = PALETTE[gi % len(PALETTE)]
        pts = sorted(groups[label], key=lambda p: p[0])
        segment: list[str] = []
        segments = []
        for x, y in pts:
            if y is None:
                if segment:
                    segments.append(segment)
                segment = []
                continue
            segment.append(f"{px(x):.2f},{py(y):.2f}")
        if segment:
            segments.append(segment)
        for seg in segments:
            out.append(f'<polyline data-series="{escape(label)}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5" points="{" ".join(seg)}"/>')
            for p in seg:
                cx, cy = p.split(",")
                out.append(f'<circle cx="{cx}" cy="{cy}" r="2" fill="{color}"/>')
        ly = mt + 14 * gi
        out.append(f'<text x="{ml + pw + 10}" y="{ly + 4}" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(rows: Sequence[dict], plots: PlotSpec | Sequence[PlotSpec] | None, out_dir: str | os.PathLike,
                name: str = "report", columns: Sequence[str] | None = None) -> list[Path]:
    """Write ``<name>.csv`` and one SVG per plot spec; empty rows give a header-only CSV and no SVG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_csv(rows, out_dir / f"{name}.csv", columns)]
    if not rows or plots is None:
        return paths
    for spec in [plots] if isinstance(plots, PlotSpec) else plots:
        path = out_dir / f"{spec.name}.svg"
        atomic_write(path, svg_text(rows, spec).encode("utf-8"))
        paths.append(path)
    return paths


# figure analogs used by the bench / report subcommands
BENCH_PLOTS = [
    PlotSpec("time_vs_seq_len", "seq_len", "median_ms", "subject", "sequence length", "median step time (ms)",
             "Step time vs sequence length"),
    PlotSpec("time_vs_num_adapters", "num_adapters", "median_ms", "subject", "number of adapters",
             "median step time (ms)", "Step time vs number of adapters"),
    PlotSpec("time_vs_dropped_layers", "n_dropped", "median_ms", "subject", "layers without adapters",
             "median step time (ms)", "Step time vs dropped layers"),
]
