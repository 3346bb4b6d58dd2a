"""CSV tables and minimal static SVG charts for run reports."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

W, H, PAD = 480, 300, 48


def write_csv(path: str | Path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def _frame(title: str, body: list[str]) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            '<rect width="100%" height="100%" fill="white"/>',
            f'<text x="{W / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">'
            f'{escape(title)}</text>',
            f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD / 2}" y2="{H - PAD}" stroke="black"/>',
            f'<line x1="{PAD}" y1="{PAD / 2 + 10}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _scale(values, lo=None, hi=None):
    lo = min(values) if lo is None else lo
    hi = max(values) if hi is None else hi
    span = (hi - lo) or 1.0
    top, bottom = PAD / 2 + 10, H - PAD
    return lambda v: bottom - (v - lo) / span * (bottom - top), lo, hi


def svg_bar(path: str | Path, labels: list[str], values: list[float], title: str = "") -> Path:
    y_of, lo, hi = _scale(values, lo=min(0.0, min(values, default=0.0)))
    n = max(len(values), 1)
    slot = (W - 1.5 * PAD) / n
    body = []
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = PAD + i * slot + slot * 0.15
        y0, y1 = y_of(max(v, 0.0)), y_of(min(v, 0.0))
        body.append(f'<rect x="{x:.1f}" y="{y0:.1f}" width="{slot * 0.7:.1f}" height="{y1 - y0:.1f}" '
                    f'fill="steelblue"/>')
        body.append(f'<text x="{x + slot * 0.35:.1f}" y="{H - PAD + 16}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="11">{escape(str(lab))}</text>')
        body.append(f'<text x="{x + slot * 0.35:.1f}" y="{y0 - 4:.1f}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="10">{v:.4g}</text>')
    Path(path).write_text(_frame(title, body))
    return Path(path)


def svg_line(path: str | Path, xs: list[float], ys: list[float], title: str = "") -> Path:
    y_of, lo, hi = _scale(ys)
    x_lo, x_hi = min(xs, default=0), max(xs, default=1)
    x_span = (x_hi - x_lo) or 1.0

    def x_of(v):
        return PAD + (v - x_lo) / x_span * (W - 1.5 * PAD)

    pts = " ".join(f"{x_of(x):.1f},{y_of(y):.1f}" for x, y in zip(xs, ys))
    body = [f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>']
    body += [f'<circle cx="{x_of(x):.1f}" cy="{y_of(y):.1f}" r="3" fill="steelblue"/>' for x, y in zip(xs, ys)]
    body.append(f'<text x="{PAD - 4}" y="{y_of(hi):.1f}" text-anchor="end" font-family="sans-serif" '
                f'font-size="10">{hi:.4g}</text>')
    body.append(f'<text x="{PAD - 4}" y="{y_of(lo):.1f}" text-anchor="end" font-family="sans-serif" '
                f'font-size="10">{lo:.4g}</text>')
    Path(path).write_text(_frame(title, body))
    return Path(path)


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Plain-text aligned table."""
    cells = [[str(c) for c in columns]] + [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
