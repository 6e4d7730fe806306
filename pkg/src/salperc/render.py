"""Deterministic SVG and HTML rendering of highlighted sentences.

Three views of the same sentence: heatmaps shade each word's background
on a white-to-red ramp driven by its saliency, bar charts draw one
equally-wide bar per word against fixed 0 and 1 reference lines, and
bias strips reuse the heatmap layout with a red/blue diverging ramp.
All geometry lives on a monospaced grid, so a box's width is exactly
proportional to its character count and two runs over the same inputs
produce byte-identical documents.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from html import escape
from typing import NamedTuple

from .features import SaliencyMap, Sentence

MODES = ("heatmap", "corrected-heatmap", "bars", "bias")
MARGIN = 10
_TEXT_GAP = 8  # px between the bar area and the word line


@dataclass(frozen=True)
class RgbColor:
    r: int
    g: int
    b: int

    def __post_init__(self):
        for name in ("r", "g", "b"):
            v = getattr(self, name)
            if not (isinstance(v, int) and 0 <= v <= 255):
                raise ValueError(f"channel {name}={v!r} outside 0..255")

    @property
    def css(self) -> str:
        return f"rgb({self.r},{self.g},{self.b})"


@dataclass(frozen=True)
class RenderSpec:
    mode: str = "heatmap"
    font: str = "DejaVu Sans Mono"
    cell_padding: int = 4
    bar_area_height: int = 60
    char_width: int = 10
    font_size: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.mode == "bars" and self.bar_area_height <= 0:
            raise ValueError(
                f"bar area height must be positive, got {self.bar_area_height}")
        if self.cell_padding < 0 or self.char_width <= 0 or self.font_size <= 0:
            raise ValueError("non-positive geometry in render spec")


class RenderedHeatmap(NamedTuple):
    svg: str
    html: str


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def saliency_to_rgb(s: float) -> RgbColor:
    """White-to-red ramp: saturation s at full value, hue 0."""
    if not (0.0 <= s <= 1.0):
        warnings.warn(f"saliency {s} outside [0, 1], clamped")
        s = min(1.0, max(0.0, s))
    g = 255 - _round_half_away(255.0 * s)
    return RgbColor(255, g, g)


def bias_to_rgb(b: float, scale: tuple) -> RgbColor:
    """Diverging ramp: red for positive bias, blue for negative, white
    at zero.  ``scale`` holds the full-saturation |b| per sign."""
    if b == 0.0:
        return RgbColor(255, 255, 255)
    pos, neg = scale
    if b > 0:
        if pos <= 0:
            raise ValueError(f"positive bias {b} but non-positive scale {pos}")
        g = 255 - _round_half_away(255.0 * min(1.0, b / pos))
        return RgbColor(255, g, g)
    if neg <= 0:
        raise ValueError(f"negative bias {b} but non-positive scale {neg}")
    g = 255 - _round_half_away(255.0 * min(1.0, -b / neg))
    return RgbColor(g, g, 255)


def _num(x) -> str:
    if isinstance(x, float):
        return str(int(x)) if x.is_integer() else repr(x)
    return str(x)


def _check_aligned(sentence: Sentence, n_values: int, what: str):
    if n_values != len(sentence):
        raise ValueError(f"{what} has {n_values} entries but sentence "
                         f"{sentence.id!r} has {len(sentence)} tokens")


def _svg_open(width, height, spec: RenderSpec) -> str:
    return ('<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{_num(width)}" height="{_num(height)}" '
            f'viewBox="0 0 {_num(width)} {_num(height)}" '
            f'font-family="{escape(spec.font)}, monospace" '
            f'font-size="{spec.font_size}">')


def _heat_svg(sentence: Sentence, colors, spec: RenderSpec) -> str:
    box_h = spec.font_size + 2 * spec.cell_padding
    widths = [spec.char_width * len(t.surface) for t in sentence.tokens]
    total_w = 2 * MARGIN + sum(widths) + spec.char_width * (len(widths) - 1)
    total_h = 2 * MARGIN + box_h
    baseline = MARGIN + spec.cell_padding + _round_half_away(0.8 * spec.font_size)
    parts = [_svg_open(total_w, total_h, spec)]
    x = MARGIN
    for tok, color, w in zip(sentence.tokens, colors, widths):
        parts.append(f'<rect x="{_num(x)}" y="{MARGIN}" width="{_num(w)}" '
                     f'height="{box_h}" fill="{color.css}"/>')
        parts.append(f'<text x="{_num(x)}" y="{baseline}" textLength="{_num(w)}" '
                     f'lengthAdjust="spacingAndGlyphs">{escape(tok.surface)}</text>')
        x += w + spec.char_width
    parts.append("</svg>")
    return "\n".join(parts)


def _heat_html(sentence: Sentence, colors, spec: RenderSpec) -> str:
    spans = []
    for tok, color in zip(sentence.tokens, colors):
        spans.append(f'<span style="background-color:{color.css};'
                     f'padding:{spec.cell_padding}px 0">'
                     f"{escape(tok.surface)}</span>")
    body = " ".join(spans)
    return ("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n"
            "<meta charset=\"utf-8\"/>\n"
            f"<title>{escape(sentence.id)}</title>\n</head>\n<body>\n"
            f'<p style="font-family:\'{escape(spec.font)}\',monospace;'
            f'font-size:{spec.font_size}px;line-height:2.2">'
            f"{body}</p>\n</body>\n</html>\n")


def render_heatmap(sentence: Sentence, smap: SaliencyMap,
                   spec: RenderSpec | None = None) -> RenderedHeatmap:
    """Word-background heatmap as an SVG document plus an HTML mirror
    with inline styles."""
    spec = spec or RenderSpec(mode="heatmap")
    _check_aligned(sentence, len(smap.scores), "saliency map")
    colors = [saliency_to_rgb(s) for s in smap.scores]
    return RenderedHeatmap(_heat_svg(sentence, colors, spec),
                           _heat_html(sentence, colors, spec))


def render_bars(sentence: Sentence, smap: SaliencyMap,
                spec: RenderSpec | None = None) -> str:
    """Bar-chart view: equal bar widths for every word, bar height
    s * bar-area-height, reference lines at 0 and 1, uncolored text."""
    spec = spec or RenderSpec(mode="bars")
    _check_aligned(sentence, len(smap.scores), "saliency map")
    cw = spec.char_width
    max_len = max(len(t.surface) for t in sentence.tokens)
    content_w = cw * max_len
    col_w = content_w + cw
    bar_w = 2 * cw
    n = len(sentence)
    bah = spec.bar_area_height
    total_w = 2 * MARGIN + n * col_w - cw
    text_top = MARGIN + bah + _TEXT_GAP
    baseline = text_top + _round_half_away(0.8 * spec.font_size)
    total_h = text_top + _round_half_away(1.2 * spec.font_size) + MARGIN
    parts = [_svg_open(total_w, total_h, spec)]
    right = total_w - MARGIN
    parts.append(f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{right}" y2="{MARGIN}" '
                 'stroke="rgb(200,200,200)"/>')
    parts.append(f'<line x1="{MARGIN}" y1="{MARGIN + bah}" x2="{right}" '
                 f'y2="{MARGIN + bah}" stroke="rgb(200,200,200)"/>')
    for i, (tok, s) in enumerate(zip(sentence.tokens, smap.scores)):
        word_x = MARGIN + i * col_w
        bar_x = word_x + (content_w - bar_w) / 2
        h = s * bah
        if h > 0:
            parts.append(f'<rect x="{_num(bar_x)}" y="{_num(MARGIN + bah - h)}" '
                         f'width="{bar_w}" height="{_num(h)}" '
                         'fill="rgb(120,120,120)"/>')
        parts.append(f'<line class="tick" x1="{_num(bar_x)}" y1="{MARGIN + bah}" '
                     f'x2="{_num(bar_x + bar_w)}" y2="{MARGIN + bah}" '
                     'stroke="rgb(0,0,0)" stroke-width="2"/>')
        w = cw * len(tok.surface)
        text_x = word_x + (content_w - w) / 2
        parts.append(f'<text x="{_num(text_x)}" y="{baseline}" '
                     f'textLength="{_num(w)}" lengthAdjust="spacingAndGlyphs">'
                     f"{escape(tok.surface)}</text>")
    parts.append("</svg>")
    return "\n".join(parts)


def bias_colors(biases, absolute_scale=None) -> list:
    if absolute_scale is not None:
        if absolute_scale <= 0:
            raise ValueError(f"absolute scale must be positive, got {absolute_scale}")
        scale = (float(absolute_scale), float(absolute_scale))
    else:
        pos = max((b for b in biases if b > 0), default=0.0)
        neg = max((-b for b in biases if b < 0), default=0.0)
        scale = (pos, neg)
    return [bias_to_rgb(b, scale) for b in biases]


def render_bias_strip(sentence: Sentence, report, spec: RenderSpec | None = None,
                      which: str = "before", absolute_scale=None) -> str:
    """Heatmap-layout strip colored by per-token bias, scaled per sign
    to this sentence's own extremes (or to one absolute scale)."""
    spec = spec or RenderSpec(mode="bias")
    snap = getattr(report, which)
    _check_aligned(sentence, len(snap), "bias report")
    biases = [sc.b for sc in snap.scores]
    return _heat_svg(sentence, bias_colors(biases, absolute_scale), spec)
