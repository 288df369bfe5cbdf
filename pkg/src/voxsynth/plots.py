"""Minimal deterministic SVG emitters for the report figures.

Hand-rolled so identical reports produce byte-identical files: no timestamps,
no generated ids, floats formatted with a fixed precision.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _f(x: float) -> str:
    return f"{float(x):.6g}"


def _doc(width: int, height: int, body: list[str]) -> str:
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n'
    )
    return head + "\n".join(body) + "\n</svg>\n"


def _text(x, y, s, size=11, anchor="middle") -> str:
    return (
        f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" '
        f'font-size="{size}" text-anchor="{anchor}">{s}</text>'
    )


class _Axis:
    """Linear map from data to pixel coordinates."""

    def __init__(self, lo, hi, px_lo, px_hi):
        if hi <= lo:
            hi = lo + 1.0
        self.lo, self.hi, self.px_lo, self.px_hi = lo, hi, px_lo, px_hi

    def __call__(self, v):
        frac = (v - self.lo) / (self.hi - self.lo)
        return self.px_lo + frac * (self.px_hi - self.px_lo)


def _box_elements(x, half_width, values, color, yaxis) -> list[str]:
    q1, q2, q3 = np.percentile(values, [25, 50, 75])
    lo, hi = float(np.min(values)), float(np.max(values))
    parts = [
        f'<line x1="{_f(x)}" y1="{_f(yaxis(lo))}" x2="{_f(x)}" y2="{_f(yaxis(hi))}" '
        f'stroke="{color}" stroke-width="1"/>',
        f'<rect class="box" x="{_f(x - half_width)}" y="{_f(yaxis(q3))}" '
        f'width="{_f(2 * half_width)}" height="{_f(abs(yaxis(q1) - yaxis(q3)))}" '
        f'fill="{color}" fill-opacity="0.35" stroke="{color}"/>',
        f'<line x1="{_f(x - half_width)}" y1="{_f(yaxis(q2))}" x2="{_f(x + half_width)}" '
        f'y2="{_f(yaxis(q2))}" stroke="{color}" stroke-width="2"/>',
    ]
    return parts


def boxplot_svg(real_volumes, synth_volumes, region_d) -> str:
    """Paired per-region volume distributions annotated with the effect size."""
    real_volumes = np.asarray(real_volumes)
    synth_volumes = np.asarray(synth_volumes)
    k = real_volumes.shape[1]
    width, height = 120 * k + 80, 360
    all_vals = np.concatenate([real_volumes.reshape(-1), synth_volumes.reshape(-1)])
    yaxis = _Axis(float(all_vals.min()), float(all_vals.max()), height - 50, 40)
    body = []
    for j in range(k):
        cx = 80 + 120 * j
        body += _box_elements(cx - 22, 16, real_volumes[:, j], "#3566a5", yaxis)
        body += _box_elements(cx + 22, 16, synth_volumes[:, j], "#c05a2e", yaxis)
        body.append(_text(cx, 24, f"d={_f(region_d[j])}"))
        body.append(_text(cx, height - 28, f"region {j + 1}"))
    body.append(_text(40, 16, "real", size=11, anchor="start"))
    body.append(_text(80, 16, "synthetic", size=11, anchor="start"))
    return _doc(width, height, body)


def scatter_svg(x, y, label_x, label_y, title) -> str:
    """Scatter with the identity line; one point per region."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    width = height = 360
    lo = float(min(x.min(), y.min()))
    hi = float(max(x.max(), y.max()))
    pad = 0.1 * (hi - lo if hi > lo else 1.0)
    xaxis = _Axis(lo - pad, hi + pad, 50, width - 20)
    yaxis = _Axis(lo - pad, hi + pad, height - 50, 20)
    body = [
        f'<line x1="{_f(xaxis(lo - pad))}" y1="{_f(yaxis(lo - pad))}" '
        f'x2="{_f(xaxis(hi + pad))}" y2="{_f(yaxis(hi + pad))}" '
        'stroke="#999999" stroke-dasharray="4,3"/>'
    ]
    for j, (xv, yv) in enumerate(zip(x, y)):
        body.append(
            f'<circle class="pt" cx="{_f(xaxis(xv))}" cy="{_f(yaxis(yv))}" r="4" '
            'fill="#3566a5"/>'
        )
        body.append(_text(xaxis(xv), yaxis(yv) - 7, str(j + 1), size=9))
    body.append(_text(width / 2, 14, title))
    body.append(_text(width / 2, height - 6, label_x))
    body.append(_text(12, height / 2, label_y, anchor="middle"))
    return _doc(width, height, body)


def trend_svg(pool_sizes, maes) -> str:
    """Held-out error versus synthetic pool size."""
    pool_sizes = [float(s) for s in pool_sizes]
    maes = [float(v) for v in maes]
    width, height = 420, 300
    xaxis = _Axis(min(pool_sizes), max(pool_sizes), 60, width - 20)
    yaxis = _Axis(min(maes), max(maes), height - 50, 30)
    pts = " ".join(f"{_f(xaxis(s))},{_f(yaxis(m))}" for s, m in zip(pool_sizes, maes))
    body = [f'<polyline points="{pts}" fill="none" stroke="#3566a5" stroke-width="2"/>']
    for s, m in zip(pool_sizes, maes):
        body.append(
            f'<circle class="pt" cx="{_f(xaxis(s))}" cy="{_f(yaxis(m))}" r="4" fill="#c05a2e"/>'
        )
        body.append(_text(xaxis(s), height - 30, _f(s), size=10))
        body.append(_text(xaxis(s), yaxis(m) - 8, _f(m), size=9))
    body.append(_text(width / 2, 16, "held-out age error vs synthetic pool size"))
    body.append(_text(width / 2, height - 8, "synthetic pool size"))
    return _doc(width, height, body)


def emit_plots(report, out_dir, augmentation=None) -> list[str]:
    """Write the figure analogs for a report; returns the file names written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def write(name, text):
        (out / name).write_text(text)
        written.append(name)

    write(
        "region_volumes_boxplot.svg",
        boxplot_svg(report.real_volumes, report.synth_volumes, report.region_d),
    )
    write(
        "sex_effects_scatter.svg",
        scatter_svg(
            report.sex_d_real, report.sex_d_synth,
            "sex effect (real)", "sex effect (synthetic)",
            f"sex effects: r={_f(report.sex_effect_correlation[0])}",
        ),
    )
    write(
        "age_effects_scatter.svg",
        scatter_svg(
            report.age_r_real, report.age_r_synth,
            "age correlation (real)", "age correlation (synthetic)",
            f"aging effects: r={_f(report.age_effect_correlation[0])}",
        ),
    )
    if augmentation is not None and len(augmentation.pool_sizes) > 0:
        write("mae_trend.svg", trend_svg(augmentation.pool_sizes, augmentation.mae))
    return written
