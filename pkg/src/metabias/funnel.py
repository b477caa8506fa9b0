"""Funnel plots as standalone SVG documents.

The standard plot puts published effects against precision (1/s). The
modified plot uses sqrt(n) on the vertical axis and draws every registered
but unpublished study as a horizontal line at its planned sqrt(n), so the
sample sizes of missing studies can be read against the published ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from . import remeta
from .dataset import MetaDataset

__all__ = ["FunnelSpec", "render_svg"]


@dataclass(frozen=True)
class FunnelSpec:
    mode: str = "modified"
    width: int = 640
    height: int = 480
    margin: int = 56
    radius: float = 4.0
    reference: bool = True

    def __post_init__(self):
        if self.mode not in ("standard", "modified"):
            raise ValueError(f"mode must be 'standard' or 'modified', got {self.mode!r}")
        if self.width <= 2 * self.margin or self.height <= 2 * self.margin:
            raise ValueError("plot area is empty: increase width/height or reduce margin")

    @property
    def y_label(self) -> str:
        return "1/SE" if self.mode == "standard" else "sqrt(n)"


def _nice_ticks(lo: float, hi: float, count: int = 5) -> List[float]:
    span = hi - lo
    raw = span / max(count, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * span:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _pad(lo, hi, frac=0.08):
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    d = (hi - lo) * frac
    return lo - d, hi + d


def render_svg(dataset: MetaDataset, spec: FunnelSpec = FunnelSpec()) -> str:
    """SVG text with one ``<circle>`` per published and one ``<line>`` per unpublished study.

    Unpublished studies are drawn only in modified mode. Axes and the REML
    reference line are ``<path>`` elements, so ``<line>`` elements correspond
    one-to-one with unpublished studies.
    """
    pub = dataset.published
    if not pub:
        raise ValueError("funnel plot needs at least one published study")
    y = dataset.yi
    if spec.mode == "standard":
        heights = 1.0 / dataset.sei
        unpub = []
    else:
        missing = [s.id for s in dataset.studies if s.n is None]
        if missing:
            raise ValueError(f"modified funnel needs n for every study; missing for {', '.join(missing)}")
        heights = np.sqrt(dataset.n_pub)
        unpub = list(dataset.unpublished)
    unpub_h = np.sqrt(np.array([s.n for s in unpub], dtype=float))

    ref = None
    if spec.reference and dataset.n_published >= 2:
        try:
            ref = remeta.fit_random_effects(dataset).theta_hat
        except remeta.ConvergenceError:
            ref = None

    xs = list(y) + ([ref] if ref is not None else [])
    x_lo, x_hi = _pad(min(xs), max(xs))
    all_h = np.concatenate([heights, unpub_h])
    y_lo, y_hi = 0.0, 1.05 * float(all_h.max())

    m, W, H = spec.margin, spec.width, spec.height
    px = lambda v: m + (v - x_lo) / (x_hi - x_lo) * (W - 2 * m)
    py = lambda v: H - m - (v - y_lo) / (y_hi - y_lo) * (H - 2 * m)
    f = lambda v: f"{v:.2f}"

    out: List[str] = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<title>{escape(dataset.name or 'funnel plot')} ({spec.mode})</title>",
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<path id="axes" d="M{m},{m} V{H - m} H{W - m}" fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(x_lo, x_hi):
        out.append(f'<text x="{f(px(t))}" y="{H - m + 16}" font-size="11" text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        out.append(f'<text x="{m - 6}" y="{f(py(t) + 4)}" font-size="11" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{W / 2:.0f}" y="{H - 12}" font-size="12" text-anchor="middle">log odds ratio</text>')
    out.append(
        f'<text x="14" y="{H / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {H / 2:.0f})">{spec.y_label}</text>'
    )
    if ref is not None:
        out.append(
            f'<path id="reference" d="M{f(px(ref))},{m} V{H - m}" stroke="grey" stroke-dasharray="4 3" fill="none"/>'
        )
    for i, (s, yy, hh) in enumerate(zip(pub, y, heights), 1):
        out.append(
            f'<circle id="pub-{i}" class="published" data-study={quoteattr(s.id)} '
            f'cx="{f(px(yy))}" cy="{f(py(hh))}" r="{spec.radius:g}" fill="black"/>'
        )
    for i, (s, hh) in enumerate(zip(unpub, unpub_h), 1):
        out.append(
            f'<line id="unpub-{i}" class="unpublished" data-study={quoteattr(s.id)} '
            f'x1="{m}" x2="{W - m}" y1="{f(py(hh))}" y2="{f(py(hh))}" stroke="steelblue"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
