"""Attack-success / error-attack rates, edit-quality proxies, and report output."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .imagecore import mse

# Squared error of a maximally wrong guess for a [0, 1] quantity around its midpoint.
PROXY_SCALE = 0.25


class Verdict(str, Enum):
    BACKDOOR = "backdoor_target"
    NORMAL = "normal"


@dataclass(frozen=True)
class SampleVerdict:
    sample_id: str
    classified: Verdict
    dist_to_backdoor: float
    dist_to_normal: float


def classify_output(gen, backdoor_target, normal_target, margin: float = 0.0, sample_id: str = "") -> SampleVerdict:
    """Nearest-target rule; ties (and anything inside ``margin``) count as normal."""
    d_b = mse(gen, backdoor_target)
    d_n = mse(gen, normal_target)
    label = Verdict.BACKDOOR if d_b < d_n - margin else Verdict.NORMAL
    return SampleVerdict(sample_id, label, d_b, d_n)


def _rate(verdicts: Sequence[SampleVerdict], what: str) -> float:
    if not verdicts:
        raise ValueError(f"cannot compute {what} over an empty set")
    hits = sum(v.classified is Verdict.BACKDOOR for v in verdicts)
    return 100.0 * hits / len(verdicts)


def compute_asr(triggered: Sequence[SampleVerdict]) -> float:
    return _rate(triggered, "ASR")


def compute_ear(clean: Sequence[SampleVerdict]) -> float:
    return _rate(clean, "EAR")


def functionality_proxies(gen, sample) -> tuple[float | None, float]:
    """``(text_align, image_preserve)`` from the sample's known edit mask.

    text_align scores the generated pixels inside the edit mask against the
    ground-truth edit; image_preserve scores the pixels outside it against the
    source image. Both are ``1 - MSE / 0.25`` clipped to ``[0, 1]``.
    text_align is ``None`` for an empty mask; image_preserve is 1.0 when the
    mask covers the whole image.
    """
    gen = np.asarray(gen, dtype=np.float64)
    mask = np.asarray(sample.edit_mask, dtype=bool)
    if mask.any():
        err = np.mean((gen[mask] - np.asarray(sample.edit_target, dtype=np.float64)[mask]) ** 2)
        text_align = float(np.clip(1.0 - err / PROXY_SCALE, 0.0, 1.0))
    else:
        text_align = None
    keep = ~mask
    if keep.any():
        err = np.mean((gen[keep] - np.asarray(sample.input_image, dtype=np.float64)[keep]) ** 2)
        image_preserve = float(np.clip(1.0 - err / PROXY_SCALE, 0.0, 1.0))
    else:
        image_preserve = 1.0
    return text_align, image_preserve


@dataclass
class EvalReport:
    method: str
    goal: str
    asr: float
    ear: float
    text_align: float
    image_preserve: float
    n_triggered: int
    n_clean: int
    triggered: list[SampleVerdict] = field(default_factory=list, repr=False)
    clean: list[SampleVerdict] = field(default_factory=list, repr=False)
    extra: dict[str, float] = field(default_factory=dict)


def summarize(method: str, goal: str, triggered, clean, proxies) -> EvalReport:
    aligns = [a for a, _ in proxies if a is not None]
    return EvalReport(
        method=method,
        goal=goal,
        asr=compute_asr(triggered),
        ear=compute_ear(clean),
        text_align=float(np.mean(aligns)) if aligns else float("nan"),
        image_preserve=float(np.mean([p for _, p in proxies])) if proxies else float("nan"),
        n_triggered=len(triggered),
        n_clean=len(clean),
        triggered=list(triggered),
        clean=list(clean),
    )


# --------------------------------------------------------------------------- CSV reports

REPORT_HEADER = ["method", "goal", "ear_pct", "asr_pct", "text_align", "image_preserve"]
GOALS = ("image", "style", "object")


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


def emit_report(reports: Sequence[EvalReport], path: str | os.PathLike) -> Path:
    """Long-format CSV, one row per (method, goal)."""
    if not reports:
        raise ValueError("no reports to write")
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow([r.method, r.goal, _fmt(r.ear), _fmt(r.asr), _fmt(r.text_align), _fmt(r.image_preserve)])
    return path


def method_table(reports: Sequence[EvalReport]) -> tuple[list[str], list[list]]:
    """Rows of methods; columns EAR/ASR for image, style, object and their averages.

    Averages run over the goals present for that method.
    """
    if not reports:
        raise ValueError("no reports to tabulate")
    header = ["method"]
    for g in GOALS + ("average",):
        header += [f"{g}_ear_pct", f"{g}_asr_pct"]
    by_method: dict[str, dict[str, EvalReport]] = {}
    for r in reports:
        by_method.setdefault(r.method, {})[r.goal] = r
    rows = []
    for method, goals in by_method.items():
        row: list = [method]
        ears, asrs = [], []
        for g in GOALS:
            r = goals.get(g)
            row += [r.ear if r else float("nan"), r.asr if r else float("nan")]
            if r:
                ears.append(r.ear)
                asrs.append(r.asr)
        row += [float(np.mean(ears)), float(np.mean(asrs))]
        rows.append(row)
    return header, rows


def emit_table(reports: Sequence[EvalReport], path: str | os.PathLike) -> Path:
    header, rows = method_table(reports)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    return path


def write_rows(path: str | os.PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    return path


# --------------------------------------------------------------------------- SVG plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _svg_axes(title, xlabel, ylabel, xlim, ylim, width=480, height=320):
    left, right, top, bottom = 56, 130, 30, 44
    pw, ph = width - left - right, height - top - bottom
    (x0, x1), (y0, y1) = xlim, ylim
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        parts.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 14}" text-anchor="middle">{xv:g}</text>')
        parts.append(f'<text x="{left - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
        parts.append(f'<line x1="{left}" x2="{left + pw}" y1="{sy(yv):.1f}" y2="{sy(yv):.1f}" stroke="#ddd"/>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(xlabel)}</text>')
    parts.append(
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.1f})">{_esc(ylabel)}</text>'
    )
    return parts, sx, sy, left + pw + 10, top


def svg_line_plot(series: Mapping[str, Sequence[tuple[float, float]]], title: str, xlabel: str,
                  ylabel: str, ylim=(0.0, 100.0)) -> str:
    if not series or not any(series.values()):
        raise ValueError("empty sweep: nothing to plot")
    xs = [x for pts in series.values() for x, _ in pts]
    parts, sx, sy, lx, ly = _svg_axes(title, xlabel, ylabel, (min(xs), max(xs)), ylim)
    for k, (name, pts) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = sorted(pts)
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        parts.append(f'<rect x="{lx}" y="{ly + 16 * k}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{lx + 14}" y="{ly + 16 * k + 9}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_scatter(points: Mapping[str, tuple[float, float]], title: str, xlabel: str, ylabel: str) -> str:
    if not points:
        raise ValueError("empty sweep: nothing to plot")
    xs = [p[0] for p in points.values()]
    ys = [p[1] for p in points.values()]
    pad = 0.02
    parts, sx, sy, lx, ly = _svg_axes(
        title, xlabel, ylabel, (min(xs) - pad, max(xs) + pad), (min(ys) - pad, max(ys) + pad)
    )
    for k, (name, (x, y)) in enumerate(points.items()):
        color = _PALETTE[k % len(_PALETTE)]
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="5" fill="{color}"/>')
        parts.append(f'<rect x="{lx}" y="{ly + 16 * k}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{lx + 14}" y="{ly + 16 * k + 9}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plots(sweep: Mapping[str, Sequence[tuple[float, float]]], path: str | os.PathLike,
               title: str, xlabel: str, ylabel: str = "ASR (%)") -> Path:
    path = Path(path)
    path.write_text(svg_line_plot(sweep, title, xlabel, ylabel), encoding="utf-8")
    return path


def emit_tradeoff_plot(reports: Sequence[EvalReport], path: str | os.PathLike) -> Path:
    """Scatter of image_preserve (x) against text_align (y), one point per method."""
    if not reports:
        raise ValueError("no reports to plot")
    pts: dict[str, list[tuple[float, float]]] = {}
    for r in reports:
        pts.setdefault(r.method, []).append((r.image_preserve, r.text_align))
    means = {m: (float(np.mean([p[0] for p in v])), float(np.mean([p[1] for p in v]))) for m, v in pts.items()}
    path = Path(path)
    path.write_text(
        svg_scatter(means, "Clean-sample edit quality", "image_preserve", "text_align"), encoding="utf-8"
    )
    return path
