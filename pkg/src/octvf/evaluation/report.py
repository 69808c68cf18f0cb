"""CSV tables and SVG figures with byte-deterministic output."""

from __future__ import annotations

import csv
import io
import os
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from ..vf_domain import RetestCITable
from .analysis import BinnedStats, MetricsReport, PointwiseMap, SectorRow

METRICS_COLUMNS = ["tag", "target", "n", "r2", "r2_lo", "r2_hi", "pearson", "pearson_lo", "pearson_hi",
                   "mae", "mae_lo", "mae_hi", "baseline_mae"]
SECTOR_COLUMNS = ["tag", "sector", "n_points", "r2", "pearson", "mae", "mae_baseline"]

# Display-only comparators from the published clinical study (dB / unitless).
REFERENCE_BASELINE_MAE = {
    ("validation", "thresholds"): 8.17, ("validation", "md"): 7.15,
    ("test", "thresholds"): 7.64, ("test", "md"): 6.26,
}
REFERENCE_POINTWISE_R_RANGE = (0.68, 0.87)
REFERENCE_WHISKERS = (33, 38)


def _f(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def metrics_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in reports:
        w.writerow([r.tag, r.target, r.n_samples,
                    _f(r.r2.value), _f(r.r2.ci_low), _f(r.r2.ci_high),
                    _f(r.pearson_r.value), _f(r.pearson_r.ci_low), _f(r.pearson_r.ci_high),
                    _f(r.mae.value), _f(r.mae.ci_low), _f(r.mae.ci_high), _f(r.baseline_mae)])
    return buf.getvalue()


def sectors_csv(sectors: dict[str, Sequence[SectorRow]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SECTOR_COLUMNS)
    for tag, rows in sectors.items():
        for s in rows:
            w.writerow([tag, s.sector, s.n_points, _f(s.r2), _f(s.pearson_r), _f(s.mae), _f(s.mae_baseline)])
    return buf.getvalue()


# ------------------------------------------------------------------- colours


def _colour(v: float, lo: float = 0.0, hi: float = 1.0) -> str:
    """White-to-dark-blue ramp."""
    t = min(max((v - lo) / (hi - lo), 0.0), 1.0)
    a, b = (247, 251, 255), (8, 48, 107)
    r, g, bl = (round(a[i] + (b[i] - a[i]) * t) for i in range(3))
    return f"#{r:02x}{g:02x}{bl:02x}"


def _n(x: float) -> str:
    return f"{x:.2f}"


# ------------------------------------------------------------------ pointwise


def pointwise_svg(pm: PointwiseMap, title: str = "Pointwise Pearson r") -> str:
    cell, margin = 44, 30
    xs, ys = pm.coords[:, 0], pm.coords[:, 1]
    x0, y1 = xs.min(), ys.max()
    width = int((xs.max() - x0) / 6 + 1) * cell + 2 * margin
    height = int((y1 - ys.min()) / 6 + 1) * cell + 2 * margin + 40
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        '<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse">'
        '<path d="M0,6 L6,0" stroke="#999" stroke-width="1"/></pattern></defs>',
        f'<text x="{margin}" y="20" font-size="14">{escape(title)}</text>',
    ]
    for k, (x, y) in enumerate(pm.coords):
        cx = margin + (x - x0) / 6 * cell
        cy = margin + 10 + (y1 - y) / 6 * cell
        v = pm.values[k]
        if np.isfinite(v):
            fill, label, cls = _colour(v), f"{v:.2f}", "cell"
            ink = "#ffffff" if v > 0.6 else "#000000"
        else:
            fill, label, ink, cls = "url(#hatch)", "n/a", "#000000", "cell undefined"
        lines.append(f'<rect class="{cls}" data-index="{k}" x="{_n(cx)}" y="{_n(cy)}" width="{cell - 2}" '
                     f'height="{cell - 2}" fill="{fill}" stroke="#333" stroke-width="0.5"/>')
        lines.append(f'<text x="{_n(cx + cell / 2 - 1)}" y="{_n(cy + cell / 2 + 4)}" font-size="11" '
                     f'text-anchor="middle" fill="{ink}">{label}</text>')
    lo, hi = REFERENCE_POINTWISE_R_RANGE
    lines.append(f'<text x="{margin}" y="{height - 12}" font-size="11">'
                 f'reference study range {lo:.2f}-{hi:.2f}; hatched cells undefined</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- whiskers


def whiskers_svg(binned: BinnedStats, ci: RetestCITable | None = None,
                 coverage: tuple[int, int, float] | None = None, title: str = "Predicted vs measured") -> str:
    w, h, m = 640, 480, 50
    lo, hi = float(binned.edges[0]), float(binned.edges[-1])
    sx = lambda v: m + (v - lo) / (hi - lo) * (w - 2 * m)
    sy = lambda v: h - m - (v - lo) / (hi - lo) * (h - 2 * m)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" '
        'font-family="sans-serif">',
        f'<text x="{m}" y="24" font-size="14">{escape(title)}</text>',
    ]
    if ci is not None:
        sel = (ci.measured_db >= lo) & (ci.measured_db <= hi)
        mx, lw, up = ci.measured_db[sel], np.clip(ci.lower_db[sel], lo, hi), np.clip(ci.upper_db[sel], lo, hi)
        pts = [f"{_n(sx(a))},{_n(sy(b))}" for a, b in zip(mx, up)]
        pts += [f"{_n(sx(a))},{_n(sy(b))}" for a, b in zip(mx[::-1], lw[::-1])]
        if pts:
            out.append(f'<polygon class="ci-band" points="{" ".join(pts)}" fill="#c6dbef" opacity="0.7"/>')
    out.append(f'<line x1="{_n(sx(lo))}" y1="{_n(sy(lo))}" x2="{_n(sx(hi))}" y2="{_n(sy(hi))}" '
               'stroke="#888" stroke-dasharray="4,3"/>')
    out.append(f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="#000"/>')
    for t in range(int(lo), int(hi) + 1, 10):
        out.append(f'<text x="{_n(sx(t))}" y="{h - m + 16}" font-size="10" text-anchor="middle">{t}</text>')
        out.append(f'<text x="{m - 6}" y="{_n(sy(t) + 3)}" font-size="10" text-anchor="end">{t}</text>')
    bw = (sx(binned.edges[1]) - sx(binned.edges[0])) * 0.6
    for b in np.flatnonzero(binned.populated):
        c = sx(binned.centers[b])
        out.append(f'<line class="whisker" x1="{_n(c)}" y1="{_n(sy(binned.p5[b]))}" x2="{_n(c)}" '
                   f'y2="{_n(sy(binned.p95[b]))}" stroke="#000"/>')
        top, bot = sy(binned.q75[b]), sy(binned.q25[b])
        out.append(f'<rect class="box" x="{_n(c - bw / 2)}" y="{_n(top)}" width="{_n(bw)}" '
                   f'height="{_n(max(bot - top, 0.0))}" fill="#fff" stroke="#000"/>')
        out.append(f'<line x1="{_n(c - bw / 2)}" y1="{_n(sy(binned.median[b]))}" x2="{_n(c + bw / 2)}" '
                   f'y2="{_n(sy(binned.median[b]))}" stroke="#d62728" stroke-width="2"/>')
    out.append(f'<text x="{w / 2}" y="{h - 14}" font-size="12" text-anchor="middle">measured (dB)</text>')
    note = f"reference study: {REFERENCE_WHISKERS[0]} of {REFERENCE_WHISKERS[1]} whiskers inside"
    if coverage is not None:
        note = f"{coverage[0]} of {coverage[1]} whiskers inside retest CI; " + note
    out.append(f'<text x="{m}" y="40" font-size="11">{escape(note)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------- writer


def _write(path: str, text: str) -> str:
    try:
        with open(path, "w", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report file {path}: {exc.strerror}") from exc
    return path


def summary_markdown(reports: Sequence[MetricsReport], split: str = "test") -> str:
    lines = ["| tag | target | n | R2 [CI] | r [CI] | MAE dB [CI] | baseline MAE | reference baseline |",
             "|---|---|---|---|---|---|---|---|"]
    for r in reports:
        ref = REFERENCE_BASELINE_MAE.get((split, r.target))
        lines.append(
            f"| {r.tag} | {r.target} | {r.n_samples} "
            f"| {r.r2.value:.2f} [{r.r2.ci_low:.2f}-{r.r2.ci_high:.2f}] "
            f"| {r.pearson_r.value:.2f} [{r.pearson_r.ci_low:.2f}-{r.pearson_r.ci_high:.2f}] "
            f"| {r.mae.value:.2f} [{r.mae.ci_low:.2f}-{r.mae.ci_high:.2f}] "
            f"| {r.baseline_mae:.2f} | {'' if ref is None else f'{ref:.2f}'} |"
        )
    extra = [r for r in reports if np.isfinite(r.sqrt_r2) or np.isfinite(r.mean_point_r)]
    if extra:
        lines += ["", "| tag | sqrt(R2) | mean pointwise r |", "|---|---|---|"]
        lines += [f"| {r.tag} | {_f(r.sqrt_r2)} | {_f(r.mean_point_r)} |" for r in extra]
    return "\n".join(lines) + "\n"


def render_report(reports: Sequence[MetricsReport], maps: PointwiseMap | None, binned: BinnedStats | None,
                  coverage: tuple[int, int, float] | None, out_dir: str,
                  sectors: dict[str, Sequence[SectorRow]] | None = None,
                  retest: RetestCITable | None = None, split: str = "test") -> list[str]:
    """Write metrics.csv, sectors.csv, summary.md and the two SVG figures; return the paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc.strerror}") from exc
    paths = [
        _write(os.path.join(out_dir, "metrics.csv"), metrics_csv(reports)),
        _write(os.path.join(out_dir, "sectors.csv"), sectors_csv(sectors or {})),
        _write(os.path.join(out_dir, "summary.md"), summary_markdown(reports, split)),
    ]
    if maps is not None:
        paths.append(_write(os.path.join(out_dir, "pointwise_map.svg"), pointwise_svg(maps)))
    if binned is not None:
        paths.append(_write(os.path.join(out_dir, "binned_whiskers.svg"), whiskers_svg(binned, retest, coverage)))
    return paths
