"""Plain SVG line charts of HTER-vs-fraction curves (debugging aid)."""

from __future__ import annotations

from pathlib import Path

WIDTH, HEIGHT, PAD = 360, 260, 40

_STYLE = {
    ("A", 0): ("#1f4e9c", "", "group A"),
    ("B", 0): ("#c0392b", "", "group B"),
    ("B", 1): ("#c0392b", ' stroke-dasharray="5,4"', "group B (normalized)"),
}


def curves_svg(title: str, series: dict[tuple[str, int], tuple[list[float], list[float]]]) -> str:
    """One panel; ``series`` maps ``(group, normalized)`` to ``(fractions, hter)``."""
    xs = [x for fx, _ in series.values() for x in fx] or [0.0, 1.0]
    ys = [y for _, fy in series.values() for y in fy] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(max(ys), 1e-6)
    x1 = x1 if x1 > x0 else x0 + 1.0

    def sx(x):
        return PAD + (x - x0) / (x1 - x0) * (WIDTH - 2 * PAD)

    def sy(y):
        return HEIGHT - PAD - (y - y0) / (y1 - y0) * (HEIGHT - 2 * PAD)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" font-size="12">{title}</text>',
        f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
        f'<text x="{PAD}" y="{HEIGHT - PAD + 14}" font-size="10">{x0:.2f}</text>',
        f'<text x="{WIDTH - PAD}" y="{HEIGHT - PAD + 14}" font-size="10" text-anchor="end">{x1:.2f}</text>',
        f'<text x="{PAD - 4}" y="{sy(y0):.1f}" font-size="10" text-anchor="end">{y0:.3f}</text>',
        f'<text x="{PAD - 4}" y="{sy(y1):.1f}" font-size="10" text-anchor="end">{y1:.3f}</text>',
        f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 8}" font-size="10" text-anchor="middle">fraction</text>',
    ]
    for i, key in enumerate(sorted(series)):
        color, dash, name = _STYLE.get(key, ("gray", "", f"{key}"))
        fx, fy = series[key]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(fx, fy))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>')
        ly = PAD + 12 * i
        out.append(f'<line x1="{WIDTH - PAD - 110}" y1="{ly}" x2="{WIDTH - PAD - 90}" y2="{ly}" '
                   f'stroke="{color}"{dash}/>')
        out.append(f'<text x="{WIDTH - PAD - 86}" y="{ly + 3}" font-size="9">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_curve_plots(curves: dict[tuple, tuple[list[float], list[float]]], out_dir) -> list:
    """One SVG per (model, explainer, mode) panel from :func:`read_curves_csv` output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels: dict[tuple, dict] = {}
    for (model, explainer, mode, group, normalized), xy in curves.items():
        panels.setdefault((model, explainer, mode), {})[(group, normalized)] = xy
    written = []
    for (model, explainer, mode), series in sorted(panels.items()):
        path = out_dir / f"curves_{model}_{explainer}_{mode}.svg"
        path.write_text(curves_svg(f"{model} {explainer} {mode}", series))
        written.append(path)
    return written
