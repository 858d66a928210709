"""Minimal self-contained SVG bar charts."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def grouped_bar_svg(groups, series, labels=None, title="", y_label="mAP", width=640, height=360):
    """Render grouped bars.

    ``groups`` names the x-axis groups; ``series`` maps a legend name to one
    value per group; ``labels`` optionally maps a legend name to one text
    label per group, written inside the bar (e.g. an RmAP percentage).
    """
    labels = labels or {}
    names = list(series)
    margin_l, margin_r, margin_t, margin_b = 50, 20, 40, 60
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    vmax = max([v for vals in series.values() for v in vals] + [1e-12])
    group_w = plot_w / max(len(groups), 1)
    bar_w = group_w * 0.8 / max(len(names), 1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    base_y = margin_t + plot_h
    parts.append(f'<line x1="{margin_l}" y1="{base_y}" x2="{width - margin_r}" y2="{base_y}" stroke="black"/>')
    parts.append(f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}" y2="{base_y}" stroke="black"/>')
    parts.append(
        f'<text x="14" y="{margin_t + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {margin_t + plot_h / 2:.1f})">{escape(y_label)}</text>'
    )
    for gi, group in enumerate(groups):
        gx = margin_l + gi * group_w + group_w * 0.1
        for si, name in enumerate(names):
            val = series[name][gi]
            bh = plot_h * max(val, 0.0) / vmax
            x = gx + si * bar_w
            y = base_y - bh
            color = PALETTE[si % len(PALETTE)]
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.95:.1f}" height="{bh:.1f}" fill="{color}"/>'
            )
            parts.append(
                f'<text x="{x + bar_w / 2:.1f}" y="{y - 3:.1f}" text-anchor="middle">{val:.2f}</text>'
            )
            text = labels.get(name, [None] * len(groups))[gi]
            if text:
                parts.append(
                    f'<text x="{x + bar_w / 2:.1f}" y="{base_y - 6:.1f}" text-anchor="middle" '
                    f'fill="white">{escape(text)}</text>'
                )
        parts.append(
            f'<text x="{margin_l + (gi + 0.5) * group_w:.1f}" y="{base_y + 16}" text-anchor="middle">'
            f"{escape(str(group))}</text>"
        )
    for si, name in enumerate(names):
        lx = margin_l + si * 140
        ly = height - 18
        parts.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{PALETTE[si % len(PALETTE)]}"/>')
        parts.append(f'<text x="{lx + 14}" y="{ly}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
