"""Static SVG line charts with mean and spread bands, no plotting runtime.

Charts are built from groups: each group is one labeled setting with one
y-series per seed over a shared x grid. The chart draws the per-x mean
as a polyline and, when a group has at least two runs, a translucent
band spanning mean plus and minus one population standard deviation.

Output is deterministic for fixed inputs: coordinates are formatted with
a fixed precision and nothing depends on dict ordering or time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import read_metrics

PALETTE = ["#1868b0", "#c23b22", "#2a8a4a", "#8a56c2", "#c28a22", "#22a0a0"]

MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62.0, 16.0, 34.0, 46.0


@dataclass
class SeriesGroup:
    label: str
    xs: np.ndarray  # (T,)
    runs: np.ndarray  # (n_runs, T)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def line_chart(
    groups: list[SeriesGroup],
    out_path: str | Path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    width: float = 720.0,
    height: float = 440.0,
) -> Path:
    if not groups:
        raise ValueError("no series to plot")
    means = [g.runs.mean(axis=0) for g in groups]
    stds = [g.runs.std(axis=0) for g in groups]
    all_x = np.concatenate([g.xs for g in groups])
    all_y = np.concatenate([m - s for m, s in zip(means, stds)] + [m + s for m, s in zip(means, stds)])
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo -= pad
    y_hi += pad

    plot_w = width - MARGIN_L - MARGIN_R
    plot_h = height - MARGIN_T - MARGIN_B

    def X(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def Y(y):
        return MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" '
        f'height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
        f'<rect width="{_fmt(width)}" height="{_fmt(height)}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{_fmt(width / 2)}" y="22" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{_esc(title)}</text>'
        )

    # axes
    x0, y0 = _fmt(MARGIN_L), _fmt(MARGIN_T + plot_h)
    parts.append(
        f'<line x1="{x0}" y1="{_fmt(MARGIN_T)}" x2="{x0}" y2="{y0}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{x0}" y1="{y0}" x2="{_fmt(MARGIN_L + plot_w)}" y2="{y0}" stroke="black"/>'
    )
    for t in _ticks(x_lo, x_hi):
        parts.append(
            f'<text x="{_fmt(X(t))}" y="{_fmt(MARGIN_T + plot_h + 18)}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
    for t in _ticks(y_lo, y_hi):
        parts.append(
            f'<text x="{_fmt(MARGIN_L - 6)}" y="{_fmt(Y(t) + 4)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{_fmt(MARGIN_L + plot_w / 2)}" y="{_fmt(height - 10)}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>'
        )
    if ylabel:
        cx, cy = _fmt(16.0), _fmt(MARGIN_T + plot_h / 2)
        parts.append(
            f'<text x="{cx}" y="{cy}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="12" transform="rotate(-90 {cx} {cy})">{_esc(ylabel)}</text>'
        )

    for i, (g, mean, std) in enumerate(zip(groups, means, stds)):
        color = PALETTE[i % len(PALETTE)]
        if g.runs.shape[0] >= 2:
            upper = [f"{_fmt(X(x))},{_fmt(Y(y))}" for x, y in zip(g.xs, mean + std)]
            lower = [f"{_fmt(X(x))},{_fmt(Y(y))}" for x, y in zip(g.xs[::-1], (mean - std)[::-1])]
            parts.append(
                f'<polygon points="{" ".join(upper + lower)}" fill="{color}" '
                f'fill-opacity="0.15" stroke="none"/>'
            )
        pts = " ".join(f"{_fmt(X(x))},{_fmt(Y(y))}" for x, y in zip(g.xs, mean))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>'
        )
        ly = MARGIN_T + 14 + 16 * i
        parts.append(
            f'<line x1="{_fmt(MARGIN_L + plot_w - 130)}" y1="{_fmt(ly - 4)}" '
            f'x2="{_fmt(MARGIN_L + plot_w - 106)}" y2="{_fmt(ly - 4)}" '
            f'stroke="{color}" stroke-width="1.6"/>'
        )
        parts.append(
            f'<text x="{_fmt(MARGIN_L + plot_w - 100)}" y="{_fmt(ly)}" '
            f'font-family="sans-serif" font-size="11">{_esc(g.label)}</text>'
        )

    parts.append("</svg>")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts) + "\n")
    return out_path


def plot_metrics(
    csv_paths: list[str | Path],
    column: str,
    out_path: str | Path,
    x_column: str = "iteration",
    title: str = "",
) -> Path:
    """Group metrics CSVs by their 'variant' meta key and chart `column`.

    Files without a variant annotation fall back to their stem. Runs in
    a group are truncated to the shortest run's length.
    """
    by_label: dict[str, list[tuple[list, list]]] = {}
    for p in csv_paths:
        rows, meta = read_metrics(p)
        if not rows:
            raise ValueError(f"{p} holds no metric rows")
        if column not in rows[0]:
            raise ValueError(f"{p} has no column {column!r}")
        label = meta.get("variant", Path(p).stem)
        xs = [row[x_column] for row in rows]
        ys = [row[column] for row in rows]
        by_label.setdefault(label, []).append((xs, ys))
    groups = []
    for label in sorted(by_label):
        runs = by_label[label]
        T = min(len(xs) for xs, _ in runs)
        xs = np.asarray(runs[0][0][:T], dtype=np.float64)
        ys = np.asarray([y[:T] for _, y in runs], dtype=np.float64)
        groups.append(SeriesGroup(label=label, xs=xs, runs=ys))
    return line_chart(groups, out_path, title=title, xlabel=x_column, ylabel=column)
