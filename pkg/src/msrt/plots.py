"""CSV curve files and a small dependency-free SVG line/heatmap renderer.

CSV is the contractual output; SVG is a convenience view of the same numbers.
Curve CSVs may start with ``#`` comment lines (used for provenance), which
:func:`read_curve_csv` skips.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, MARGIN = 480, 320, 48


def write_curve_csv(path: str | Path, header: Sequence[str], rows, config: dict[str, Any] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config is not None:
            fh.write("# run_config=" + json.dumps(config, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_curve_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Header names and the numeric body as a float array."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ValueError(f"{path}: no header row")
    header, body = rows[0], rows[1:]
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric cell ({exc})") from None
    return header, data.reshape(len(body), len(header))


def _scale(v: np.ndarray, lo: float, hi: float, a: float, b: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return a + (v - lo) / span * (b - a)


def svg_lines(x: np.ndarray, ys: Sequence[np.ndarray], labels: Sequence[str], title: str,
              xlabel: str = "", ylabel: str = "") -> str:
    """Line chart of one or more series sharing ``x``."""
    x = np.asarray(x, dtype=np.float64)
    all_y = np.concatenate([np.asarray(y, dtype=np.float64) for y in ys]) if ys else np.zeros(1)
    x0, x1 = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    y0, y1 = float(all_y.min()), float(all_y.max())
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
           f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
           f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
           f'<text x="12" y="{HEIGHT / 2}" font-size="11" transform="rotate(-90 12 {HEIGHT / 2})">{escape(ylabel)}</text>',
           f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 14}" font-size="10">{x0:.3g}</text>',
           f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 14}" font-size="10" text-anchor="end">{x1:.3g}</text>',
           f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{MARGIN - 4}" y="{MARGIN + 8}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    px = _scale(x, x0, x1, MARGIN, WIDTH - MARGIN)
    for i, (y, label) in enumerate(zip(ys, labels)):
        py = _scale(np.asarray(y, dtype=np.float64), y0, y1, HEIGHT - MARGIN, MARGIN)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        color = colors[i % len(colors)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{WIDTH - MARGIN}" y="{MARGIN + 14 * i}" font-size="10" '
                   f'text-anchor="end" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_heatmap(m: np.ndarray, title: str) -> str:
    """Square matrix in [-1, 1] as a blue-white-red grid."""
    m = np.asarray(m, dtype=np.float64)
    n = max(m.shape[0], 1)
    cell = (min(WIDTH, HEIGHT) - 2 * MARGIN) / n
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            v = float(np.clip(m[i, j], -1, 1))
            r = 255 if v >= 0 else int(255 * (1 + v))
            b = 255 if v <= 0 else int(255 * (1 - v))
            g = int(255 * (1 - abs(v)))
            out.append(f'<rect x="{MARGIN + j * cell:.2f}" y="{MARGIN + i * cell:.2f}" '
                       f'width="{cell:.2f}" height="{cell:.2f}" fill="rgb({r},{g},{b})"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def csv_to_svg(csv_path: str | Path, svg_path: str | Path, title: str | None = None) -> None:
    """Plot every column after the first against the first; square all-numeric
    tables whose header starts with ``w0`` are drawn as heatmaps."""
    header, data = read_curve_csv(csv_path)
    title = title or Path(csv_path).stem
    if header and header[0] == "w0" and data.shape[0] == data.shape[1]:
        text = svg_heatmap(data, title)
    else:
        if data.shape[1] < 2:
            raise ValueError(f"{csv_path}: need at least two columns to plot")
        text = svg_lines(data[:, 0], [data[:, i] for i in range(1, data.shape[1])],
                         header[1:], title, header[0], "")
    Path(svg_path).write_text(text)
