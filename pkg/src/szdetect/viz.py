"""Hand-rolled SVG output.

Plot files must be byte-identical across runs, so everything is emitted
through one canonical number formatter and attribute order is fixed by
construction (plain string templates, sorted loops at call sites).
"""

from __future__ import annotations

import math


def fmt(x: float) -> str:
    """Canonical coordinate format: fixed 2 decimals, no negative zero."""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    s = f"{float(x):.2f}"
    return "0.00" if s == "-0.00" else s


def document(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{fmt(width)}" height="{fmt(height)}" '
            f'viewBox="0 0 {fmt(width)} {fmt(height)}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def rect(x: float, y: float, w: float, h: float, fill: str,
         stroke: str = "none") -> str:
    return (f'<rect x="{fmt(x)}" y="{fmt(y)}" width="{fmt(w)}" '
            f'height="{fmt(h)}" fill="{fill}" stroke="{stroke}"/>')


def circle(cx: float, cy: float, r: float, fill: str,
           stroke: str = "black") -> str:
    return (f'<circle cx="{fmt(cx)}" cy="{fmt(cy)}" r="{fmt(r)}" '
            f'fill="{fill}" stroke="{stroke}"/>')


def text(x: float, y: float, content: str, size: float = 10,
         anchor: str = "middle", fill: str = "black") -> str:
    return (f'<text x="{fmt(x)}" y="{fmt(y)}" font-size="{fmt(size)}" '
            f'font-family="sans-serif" text-anchor="{anchor}" '
            f'fill="{fill}">{escape(content)}</text>')


def line(x1: float, y1: float, x2: float, y2: float,
         stroke: str = "black", width: float = 1.0) -> str:
    return (f'<line x1="{fmt(x1)}" y1="{fmt(y1)}" x2="{fmt(x2)}" '
            f'y2="{fmt(y2)}" stroke="{stroke}" stroke-width="{fmt(width)}"/>')


def escape(s: str) -> str:
    return (s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def diverging_color(value: float, scale: float) -> str:
    """White at 0, red for positive, blue for negative, saturating at scale."""
    if scale <= 0:
        return "rgb(255,255,255)"
    a = max(-1.0, min(1.0, value / scale))
    if a >= 0:
        level = int(round(255 - 205 * a))
        return f"rgb(255,{level},{level})"
    level = int(round(255 - 205 * -a))
    return f"rgb({level},{level},255)"
