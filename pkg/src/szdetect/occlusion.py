"""Localize the image region driving a seizure call by patch occlusion.

A size x size patch (default 4x4, stride 2) is set to a fill constant in
every band of every frame of the 30-image sequence; the drop in seizure
probability at each patch position forms the occlusion map.  The fill
default of 0 is the training mean in normalized pixel space, i.e. the
least informative patch the model ever sees.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .imaging import GRID, grid_extent_for, nearest_pixel
from .montage import ElectrodeLayout
from .viz import circle, diverging_color, document, rect, text


class NotPositiveBaseline(UserWarning):
    """The sequence was not classified as a seizure; the map is still
    computed but flagged."""


@dataclass
class OcclusionMap:
    drops: np.ndarray        # (rows, cols), baseline_prob - occluded_prob
    occluder_size: int
    stride: int
    fill: float
    baseline_prob: float
    baseline_was_positive: bool

    @property
    def positions(self) -> int:
        return self.drops.shape[0]


def occlusion_map(predict, pixels: np.ndarray, size: int = 4, stride: int = 2,
                  fill: float = 0.0) -> OcclusionMap:
    """Slide the occluder over all positions and record probability drops.

    ``predict`` maps (n, 30, 3, 16, 16) normalized pixels to (n, 2)
    probabilities; ``pixels`` is one (30, 3, 16, 16) sequence.  The occluder
    blanks all 3 bands of all 30 frames at once (spatial localization only).
    """
    pixels = np.asarray(pixels, dtype=np.float32)
    if not (1 <= size <= GRID) or stride < 1:
        raise ValueError(f"bad occluder geometry: size={size} stride={stride}")
    n_pos = (GRID - size) // stride + 1

    baseline = float(predict(pixels[np.newaxis])[0, 1])
    positive = baseline > 0.5
    if not positive:
        warnings.warn(NotPositiveBaseline(
            f"baseline seizure probability {baseline:.3f} <= 0.5"))

    occluded = np.repeat(pixels[np.newaxis], n_pos * n_pos, axis=0)
    for i in range(n_pos):
        for j in range(n_pos):
            r0, c0 = i * stride, j * stride
            occluded[i * n_pos + j, :, :, r0:r0 + size, c0:c0 + size] = fill
    probs = predict(occluded)[:, 1]
    drops = (baseline - probs).reshape(n_pos, n_pos)

    return OcclusionMap(drops=drops, occluder_size=size, stride=stride,
                        fill=float(fill), baseline_prob=baseline,
                        baseline_was_positive=positive)


def covering_positions(omap: OcclusionMap, row: int, col: int) -> list[tuple[int, int]]:
    """Occluder positions whose patch covers pixel (row, col)."""
    out = []
    for i in range(omap.drops.shape[0]):
        r0 = i * omap.stride
        if not (r0 <= row < r0 + omap.occluder_size):
            continue
        for j in range(omap.drops.shape[1]):
            c0 = j * omap.stride
            if c0 <= col < c0 + omap.occluder_size:
                out.append((i, j))
    return out


def map_to_scalp(omap: OcclusionMap, layout: ElectrodeLayout,
                 extent: float | None = None) -> list[tuple[str, float]]:
    """Rank electrodes by the mean drop of the occluders covering their
    pixel (mean keeps the ranking invariant to constant shifts, since edge
    pixels are covered by fewer positions).  Ties break by name.

    ``extent`` is the half-width of the pixel grid in projected scalp
    coordinates; when omitted it is derived from the layout the same way
    the imaging stage derives it.
    """
    if extent is None:
        extent = grid_extent_for(layout)
    scored = []
    for name in layout.names:
        row, col = nearest_pixel(layout.positions2d[name], extent)
        covering = covering_positions(omap, row, col)
        score = (float(np.mean([omap.drops[i, j] for i, j in covering]))
                 if covering else 0.0)
        scored.append((name, score))
    return sorted(scored, key=lambda t: (-t[1], t[0]))


def argmax_position(omap: OcclusionMap) -> tuple[int, int]:
    flat = int(np.argmax(omap.drops))
    return np.unravel_index(flat, omap.drops.shape)


def occluder_center_pixel(omap: OcclusionMap, i: int, j: int) -> tuple[float, float]:
    """(row, col) pixel coordinates of an occluder position's center."""
    half = (omap.occluder_size - 1) / 2.0
    return (i * omap.stride + half, j * omap.stride + half)


# --- export -----------------------------------------------------------------

def occlusion_csv(omap: OcclusionMap) -> str:
    lines = [f"# occluder_size={omap.occluder_size} stride={omap.stride} "
             f"fill={omap.fill!r} baseline_prob={omap.baseline_prob!r} "
             f"baseline_was_positive={int(omap.baseline_was_positive)}"]
    for i in range(omap.drops.shape[0]):
        lines.append(",".join(f"{float(v):.6f}" for v in omap.drops[i]))
    return "\n".join(lines) + "\n"


def occlusion_svg(omap: OcclusionMap, layout: ElectrodeLayout,
                  extent: float | None = None,
                  title: str = "occlusion map") -> str:
    """7x7 (by default) heat grid with the electrode layout on top.

    Cell (i, j) is drawn at its occluder's center; electrodes are placed by
    their pixel coordinates mapped into the same frame.
    """
    if extent is None:
        extent = grid_extent_for(layout)
    cell = 48.0
    margin = 40.0
    rows, cols = omap.drops.shape
    width = cols * cell + 2 * margin
    height = rows * cell + 2 * margin + 20
    scale = float(np.max(np.abs(omap.drops))) if omap.drops.size else 0.0

    body = [rect(0, 0, width, height, "white")]
    body.append(text(width / 2, margin - 16, title, size=13))
    for i in range(rows):
        for j in range(cols):
            body.append(rect(margin + j * cell, margin + i * cell, cell, cell,
                             diverging_color(float(omap.drops[i, j]), scale),
                             stroke="rgb(220,220,220)"))

    def pixel_to_canvas(row: float, col: float) -> tuple[float, float]:
        # occluder (i, j) center sits at pixel (i*stride + (size-1)/2, ...)
        half = (omap.occluder_size - 1) / 2.0
        x = margin + ((col - half) / omap.stride + 0.5) * cell
        y = margin + ((row - half) / omap.stride + 0.5) * cell
        return x, y

    for name in layout.names:
        row, col = nearest_pixel(layout.positions2d[name], extent)
        x, y = pixel_to_canvas(row, col)
        body.append(circle(x, y, 4, "none"))
        body.append(text(x, y - 7, name, size=8))

    footer = (f"baseline p(seizure) = {omap.baseline_prob:.4f}"
              + ("" if omap.baseline_was_positive else "  [not positive]"))
    body.append(text(width / 2, height - 8, footer, size=10))
    return document(width, height, body)
