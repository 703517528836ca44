"""Static SVG scatter plot of summary data with fitted cluster effects.

The SVG is written directly (no plotting dependency) so output is
deterministic and geometry-testable: the root element carries the data
ranges as ``data-*`` attributes and the plot area as a rect, from which the
affine data-to-pixel map can be reconstructed.  Each cluster contributes one
line through the origin with slope mu_k and a shaded band of +-1 cluster SD;
each SNP contributes one circle with error bars, colored by its assigned
cluster.
"""

from __future__ import annotations

import math
from pathlib import Path

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
GRAY = "#7f7f7f"

WIDTH, HEIGHT = 760, 560
MARGIN_LEFT, MARGIN_TOP, MARGIN_RIGHT, MARGIN_BOTTOM = 70, 20, 20, 60


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def render_scatter_svg(data, fit, posteriors, out_path) -> Path:
    """Write the scatter SVG; returns the output path."""
    out_path = Path(out_path)
    params = fit.params
    k = params.k

    xs = data.theta_x_hat
    ys = data.theta_y_hat
    x_lo = min(float((xs - data.sigma_x).min()), 0.0)
    x_hi = max(float((xs + data.sigma_x).max()), 0.0)
    y_lo = min(float((ys - data.sigma_y).min()), 0.0)
    y_hi = max(float((ys + data.sigma_y).max()), 0.0)
    x_pad = 0.05 * (x_hi - x_lo or 1.0)
    y_pad = 0.05 * (y_hi - y_lo or 1.0)
    x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(x):
        return MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h

    assigned = None
    if posteriors:
        assigned = {s.snp_id: s.assigned_cluster for s in posteriors}

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{x_lo!r}" data-x-max="{x_hi!r}" '
        f'data-y-min="{y_lo!r}" data-y-max="{y_hi!r}">',
        f'<rect class="plot-area" x="{MARGIN_LEFT}" y="{MARGIN_TOP}" '
        f'width="{plot_w}" height="{plot_h}" fill="white" stroke="#cccccc"/>',
        '<defs><clipPath id="plot-clip">'
        f'<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}"/>'
        "</clipPath></defs>",
        '<g clip-path="url(#plot-clip)">',
    ]

    for j in range(k):
        color = PALETTE[j % len(PALETTE)]
        mu = float(params.means[j])
        sd = math.sqrt(float(params.variances[j]))
        pts = [
            (px(x_lo), py((mu - sd) * x_lo)),
            (px(x_hi), py((mu - sd) * x_hi)),
            (px(x_hi), py((mu + sd) * x_hi)),
            (px(x_lo), py((mu + sd) * x_lo)),
        ]
        point_str = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts)
        parts.append(
            f'<polygon class="cluster-band" data-cluster="{j + 1}" '
            f'points="{point_str}" fill="{color}" fill-opacity="0.15" stroke="none"/>'
        )

    for i, rec in enumerate(data.records):
        cluster = assigned.get(rec.snp_id, 0) if assigned else 0
        color = PALETTE[(cluster - 1) % len(PALETTE)] if cluster else GRAY
        cx, cy = px(rec.theta_x_hat), py(rec.theta_y_hat)
        parts.append(f'<g class="snp" data-snp-id="{rec.snp_id}">')
        parts.append(
            f'<line class="err-x" x1="{_fmt(px(rec.theta_x_hat - rec.sigma_x))}" '
            f'y1="{_fmt(cy)}" x2="{_fmt(px(rec.theta_x_hat + rec.sigma_x))}" '
            f'y2="{_fmt(cy)}" stroke="{color}" stroke-opacity="0.5" stroke-width="1"/>'
        )
        parts.append(
            f'<line class="err-y" x1="{_fmt(cx)}" '
            f'y1="{_fmt(py(rec.theta_y_hat - rec.sigma_y))}" x2="{_fmt(cx)}" '
            f'y2="{_fmt(py(rec.theta_y_hat + rec.sigma_y))}" stroke="{color}" '
            f'stroke-opacity="0.5" stroke-width="1"/>'
        )
        parts.append(
            f'<circle class="pt" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="3" '
            f'fill="{color}"/>'
        )
        parts.append("</g>")

    for j in range(k):
        color = PALETTE[j % len(PALETTE)]
        mu = float(params.means[j])
        parts.append(
            f'<line class="cluster-line" data-cluster="{j + 1}" '
            f'x1="{_fmt(px(x_lo))}" y1="{_fmt(py(mu * x_lo))}" '
            f'x2="{_fmt(px(x_hi))}" y2="{_fmt(py(mu * x_hi))}" '
            f'stroke="{color}" stroke-width="2"/>'
        )

    parts.append("</g>")
    # Axis labels and zero ticks.
    parts.append(
        f'<text x="{MARGIN_LEFT + plot_w / 2:.1f}" y="{HEIGHT - 15}" '
        'text-anchor="middle" font-size="14" font-family="sans-serif">'
        "SNP-exposure association</text>"
    )
    parts.append(
        f'<text x="18" y="{MARGIN_TOP + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-size="14" font-family="sans-serif" '
        f'transform="rotate(-90 18 {MARGIN_TOP + plot_h / 2:.1f})">'
        "SNP-outcome association</text>"
    )
    parts.append("</svg>")

    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts) + "\n")
    return out_path
