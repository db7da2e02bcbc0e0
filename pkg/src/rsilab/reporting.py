"""Post-run reporting: aggregate CSV and static SVG trajectory plots.

Plots are hand-rolled, self-contained SVG with fixed formatting, so the
same inputs always produce the same bytes and reports can be compared
with a plain diff.
"""

from __future__ import annotations

import json
import os

from .loop import MANIFEST_NAME

__all__ = ["REPORT_METRICS", "collect_run_rows", "build_report", "write_report"]

REPORT_METRICS = ["mmd_to_reference", "mean_composite", "hallucination_rate"]

_PALETTE = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd",
    "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
]

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 62, 18, 34, 46


def collect_run_rows(run_dir: str) -> list[dict] | None:
    """Round metric rows of a completed run, or None if not usable."""
    manifest_path = os.path.join(run_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        return None
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("status") != "completed":
        return None
    rows = []
    name = os.path.basename(os.path.normpath(run_dir))
    for entry in manifest["rounds"]:
        with open(os.path.join(run_dir, entry["metrics"])) as mf:
            m = json.load(mf)
        rows.append({
            "run": name,
            "round": m["round"],
            "mmd_to_reference": m["mmd_to_reference"],
            "mean_composite": m["mean_composite"],
            "hallucination_rate": m["hallucination_rate"],
            "mean_alignment": m["mean_alignment"],
            "mean_aesthetic": m["mean_aesthetic"],
        })
    return rows


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def render_line_svg(title: str, series: list[tuple[str, list[float], list[float]]]) -> str:
    """One metric-vs-round line chart. series: (name, xs, ys) per run."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    span_x = max(x_hi - x_lo, 1)

    def px(x: float) -> float:
        return _ML + (x - x_lo) / span_x * (_W - _ML - _MR)

    def py(y: float) -> float:
        return _H - _MB - (y - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="20" text-anchor="middle" '
        f'font-family="monospace" font-size="14">{title}</text>',
    ]
    # axes
    parts.append(
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>'
    )
    for t in _ticks(y_lo, y_hi):
        y = py(t)
        parts.append(f'<line x1="{_ML - 4}" y1="{y:.2f}" x2="{_ML}" y2="{y:.2f}" stroke="black"/>')
        parts.append(
            f'<text x="{_ML - 8}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-family="monospace" font-size="10">{_fmt(t)}</text>'
        )
    for t in range(int(x_lo), int(x_hi) + 1):
        x = px(t)
        parts.append(
            f'<line x1="{x:.2f}" y1="{_H - _MB}" x2="{x:.2f}" y2="{_H - _MB + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{_H - _MB + 16}" text-anchor="middle" '
            f'font-family="monospace" font-size="10">{t}</text>'
        )
    parts.append(
        f'<text x="{_W // 2}" y="{_H - 10}" text-anchor="middle" '
        f'font-family="monospace" font-size="11">round</text>'
    )
    # polylines and legend
    for i, (name, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        ly = _MT + 14 * i
        parts.append(
            f'<line x1="{_W - _MR - 150}" y1="{ly:.2f}" x2="{_W - _MR - 130}" '
            f'y2="{ly:.2f}" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{_W - _MR - 124}" y="{ly + 4:.2f}" font-family="monospace" '
            f'font-size="10">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def build_report(run_dirs: list[str]):
    """Aggregate rows and SVGs for a set of run directories.

    Incomplete or missing runs are skipped; returns (csv text, svg map,
    skipped list). Raises if every directory was skipped.
    """
    per_run: list[tuple[str, list[dict]]] = []
    skipped: list[str] = []
    for d in run_dirs:
        rows = collect_run_rows(d)
        if rows is None:
            skipped.append(d)
        else:
            per_run.append((os.path.basename(os.path.normpath(d)), rows))
    if not per_run:
        raise ValueError(f"no completed runs among {list(run_dirs)}")

    header = ["run", "round"] + REPORT_METRICS + ["mean_alignment", "mean_aesthetic"]
    lines = [",".join(header)]
    for name, rows in per_run:
        for r in rows:
            lines.append(",".join([
                name, str(r["round"]),
                repr(r["mmd_to_reference"]), repr(r["mean_composite"]),
                repr(r["hallucination_rate"]), repr(r["mean_alignment"]),
                repr(r["mean_aesthetic"]),
            ]))
    csv_text = "\n".join(lines) + "\n"

    svgs = {}
    for metric in REPORT_METRICS:
        series = [
            (name, [r["round"] for r in rows], [r[metric] for r in rows])
            for name, rows in per_run
        ]
        svgs[metric] = render_line_svg(metric, series)
    return csv_text, svgs, skipped


def write_report(out_dir: str, run_dirs: list[str]) -> dict:
    """Write report.csv and one SVG per metric; returns paths and skips."""
    csv_text, svgs, skipped = build_report(run_dirs)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w") as fh:
        fh.write(csv_text)
    written.append(csv_path)
    for metric, svg in svgs.items():
        path = os.path.join(out_dir, f"{metric}.svg")
        with open(path, "w") as fh:
            fh.write(svg)
        written.append(path)
    return {"written": written, "skipped": skipped}
