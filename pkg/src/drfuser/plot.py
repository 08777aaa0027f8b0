"""Self-contained SVG line charts plus the CSV behind them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def line_chart_svg(x: Sequence[float], series: Dict[str, Sequence[float]], title: str, xlabel: str,
                   ylabel: str, width: int = 720, height: int = 360) -> str:
    x = np.asarray(x, dtype=np.float64)
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    ys = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()]) if series else np.zeros(1)
    ys = ys[np.isfinite(ys)] if np.isfinite(ys).any() else np.zeros(1)
    x0, x1 = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for i in range(5):
        fy = y0 + (y1 - y0) * i / 4
        fx = x0 + (x1 - x0) * i / 4
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{sy(fy):.1f}" y2="{sy(fy):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{sy(fy) + 4:.1f}" text-anchor="end">{fy:.4g}</text>')
        out.append(f'<text x="{sx(fx):.1f}" y="{top + ph + 18}" text-anchor="middle">{fx:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, values) in enumerate(series.items()):
        colour = PALETTE[k % len(PALETTE)]
        v = np.asarray(values, dtype=np.float64)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, v) if np.isfinite(b))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        out.append(f'<line x1="{left + 10}" x2="{left + 30}" y1="{top + 14 + 16 * k}" y2="{top + 14 + 16 * k}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + 36}" y="{top + 18 + 16 * k}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_series_csv(path, x_name: str, x: Sequence[float], series: Dict[str, Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([x_name] + list(series))
        for i, xv in enumerate(x):
            writer.writerow([xv] + [repr(float(v[i])) for v in series.values()])


def plot_predictions(timestamps_us, predicted, truth, out_dir, name: str = "steering") -> Path:
    """Predicted against recorded steering over time."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = np.asarray(timestamps_us, dtype=np.float64) * 1e-6
    series = {"ground truth": np.asarray(truth, dtype=np.float64), "predicted": np.asarray(predicted, np.float64)}
    write_series_csv(out / f"{name}.csv", "time_s", t, series)
    (out / f"{name}.svg").write_text(line_chart_svg(t, series, "Steering angle", "time (s)", "steering (rad)"))
    return out / f"{name}.svg"


def plot_history(steps, losses, out_dir, window: int = 50, name: str = "loss") -> Path:
    """Per-step loss with its trailing moving average."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    losses = np.asarray(losses, dtype=np.float64)
    avg = np.full_like(losses, np.nan)
    if losses.size >= window:
        avg[window - 1:] = np.convolve(losses, np.ones(window) / window, mode="valid")
    series = {"loss": losses, f"{window}-step mean": avg}
    write_series_csv(out / f"{name}.csv", "step", steps, series)
    (out / f"{name}.svg").write_text(line_chart_svg(steps, series, "Training loss", "step", "Huber loss"))
    return out / f"{name}.svg"
