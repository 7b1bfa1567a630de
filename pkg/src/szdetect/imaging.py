"""Scattered electrode values to 3x16x16 images and 30-image sequences.

Each 1 s block of a window turns into one image: per-channel band magnitudes
are placed at the channels' projected 2D positions and interpolated onto a
16x16 grid with a cubic radial basis function (phi(r) = r^3) plus an affine
term, one band per image plane.  The interpolant reproduces the node values
exactly and carries constants exactly.  The grid covers [-E, E]^2 with E
fixed per layout (1.1 x the largest projected radius), keeping the
pixel-to-scalp correspondence stable across frames and patients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import SzDetectError
from .montage import N_BANDS, ElectrodeLayout, band_magnitudes_multi, bipolar_position
from .windowing import BLOCKS_PER_WINDOW, WindowSequence

GRID = 16
EXTENT_MARGIN = 1.1


class TooFewPoints(SzDetectError):
    pass


class DegenerateGeometry(SzDetectError):
    pass


@dataclass
class EEGImage:
    """One second of scalp activity: (3, 16, 16) band x row x column."""

    pixels: np.ndarray
    grid_extent: float


@dataclass
class ImageSequence:
    """30 consecutive EEGImages as one (30, 3, 16, 16) array plus labels."""

    images: np.ndarray
    label: int
    patient_id: str
    recording_ref: str
    start_s: float
    grid_extent: float
    straddles_boundary: bool = False


def grid_extent_for(layout: ElectrodeLayout) -> float:
    return layout.max_projected_radius() * EXTENT_MARGIN


def grid_coords(extent: float) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) coordinates of the 16x16 pixel centers.

    Column index grows with u (to the right), row index grows against v, so
    row 0 is the front of the scalp.
    """
    step = 2.0 * extent / GRID
    centers = -extent + step * (np.arange(GRID) + 0.5)
    u = np.broadcast_to(centers[np.newaxis, :], (GRID, GRID))
    v = np.broadcast_to(-centers[:, np.newaxis], (GRID, GRID))
    return u.copy(), v.copy()


def nearest_pixel(pos: Sequence[float], extent: float) -> tuple[int, int]:
    """(row, col) of the pixel whose cell contains the given (u, v)."""
    step = 2.0 * extent / GRID
    col = int(np.clip(np.floor((pos[0] + extent) / step), 0, GRID - 1))
    row = int(np.clip(np.floor((extent - pos[1]) / step), 0, GRID - 1))
    return row, col


class CubicGridInterpolator:
    """Cubic-RBF interpolation from fixed scattered points to the 16x16 grid.

    The interpolation weights depend only on the point positions, so the
    solve happens once and evaluating a frame is a single matrix product.
    """

    def __init__(self, points: np.ndarray, extent: float):
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        if n < 3:
            raise TooFewPoints(f"need at least 3 points, got {n}")
        poly = np.column_stack([np.ones(n), points])
        if np.linalg.matrix_rank(poly) < 3:
            raise DegenerateGeometry("interpolation points are collinear")

        diff = points[:, np.newaxis, :] - points[np.newaxis, :, :]
        phi = np.linalg.norm(diff, axis=-1) ** 3
        system = np.zeros((n + 3, n + 3))
        system[:n, :n] = phi
        system[:n, n:] = poly
        system[n:, :n] = poly.T

        u, v = grid_coords(extent)
        grid_pts = np.column_stack([u.ravel(), v.ravel()])
        gdiff = grid_pts[:, np.newaxis, :] - points[np.newaxis, :, :]
        eval_mat = np.empty((GRID * GRID, n + 3))
        eval_mat[:, :n] = np.linalg.norm(gdiff, axis=-1) ** 3
        eval_mat[:, n] = 1.0
        eval_mat[:, n + 1:] = grid_pts

        try:
            # pixels = values @ weights.T with weights = (eval A^-1)[:, :n]
            self.weights = np.linalg.solve(system.T, eval_mat.T).T[:, :n]
        except np.linalg.LinAlgError:
            raise DegenerateGeometry("singular interpolation system "
                                     "(coincident points?)") from None
        self.points = points
        self.extent = float(extent)

    def interpolate(self, values: np.ndarray) -> np.ndarray:
        """(..., n_points) values -> (..., 16, 16) pixel planes."""
        values = np.asarray(values, dtype=np.float64)
        pixels = values @ self.weights.T
        return pixels.reshape(values.shape[:-1] + (GRID, GRID))


def interpolate_image(points_per_band, extent: float) -> EEGImage:
    """Build one EEGImage from per-band lists of ((u, v), value) pairs."""
    if len(points_per_band) != N_BANDS:
        raise ValueError(f"expected {N_BANDS} bands, got {len(points_per_band)}")
    pixels = np.empty((N_BANDS, GRID, GRID), dtype=np.float32)
    for b, band_points in enumerate(points_per_band):
        positions = np.array([p for p, _ in band_points], dtype=np.float64)
        values = np.array([val for _, val in band_points], dtype=np.float64)
        interp = CubicGridInterpolator(positions.reshape(-1, 2), extent)
        pixels[b] = interp.interpolate(values)
    return EEGImage(pixels=pixels, grid_extent=float(extent))


def window_to_sequence(w: WindowSequence, layout: ElectrodeLayout,
                       interp: CubicGridInterpolator | None = None) -> ImageSequence:
    """Turn one 30 s window into its 30-image sequence.

    ``interp`` may carry a prebuilt interpolator for the window's channel
    set; positions must then match the window's channels in order.
    """
    if interp is None:
        positions = np.array([bipolar_position(layout, lbl)
                              for lbl in w.channel_labels])
        interp = CubicGridInterpolator(positions, grid_extent_for(layout))
    n = int(round(w.sample_rate_hz))
    blocks = w.samples[:, :BLOCKS_PER_WINDOW * n].reshape(w.n_channels,
                                                          BLOCKS_PER_WINDOW, n)
    bands = band_magnitudes_multi(blocks, w.sample_rate_hz)  # (ch, 30, 3)
    values = bands.transpose(1, 2, 0)  # (30, 3, ch)
    images = interp.interpolate(values).astype(np.float32)
    return ImageSequence(
        images=images,
        label=w.label,
        patient_id=w.patient_id,
        recording_ref=w.recording_ref,
        start_s=w.start_s,
        grid_extent=interp.extent,
        straddles_boundary=w.straddles_boundary,
    )


@dataclass
class Normalizer:
    """Per-band standardization fit on training pixels only."""

    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,), zeros replaced by 1 at apply time

    def apply_pixels(self, pixels: np.ndarray) -> np.ndarray:
        mean = self.mean.reshape(N_BANDS, 1, 1).astype(np.float32)
        std = np.where(self.std == 0, 1.0, self.std)
        std = std.reshape(N_BANDS, 1, 1).astype(np.float32)
        return ((pixels - mean) / std).astype(np.float32)

    def apply(self, seq: ImageSequence) -> ImageSequence:
        return replace(seq, images=self.apply_pixels(seq.images))


def fit_normalizer(train: Sequence[ImageSequence]) -> Normalizer:
    if not train:
        raise ValueError("cannot fit a normalizer on an empty training set")
    stacked = np.stack([s.images for s in train])  # (N, 30, 3, 16, 16)
    mean = stacked.mean(axis=(0, 1, 3, 4), dtype=np.float64)
    std = stacked.std(axis=(0, 1, 3, 4), dtype=np.float64)
    return Normalizer(mean=mean, std=std)


def normalize_sequences(train: Sequence[ImageSequence]) -> tuple[Normalizer, list[ImageSequence]]:
    """Fit per-band statistics on the training set and standardize it."""
    norm = fit_normalizer(train)
    return norm, [norm.apply(s) for s in train]


# --- sequence store: binary float32 planes + text manifest per recording ---

def save_sequences(stem, sequences: Sequence[ImageSequence]) -> None:
    """Write `<stem>.f32` (raw planes) and `<stem>.manifest.txt`."""
    stem = str(stem)
    with open(stem + ".f32", "wb") as f:
        for seq in sequences:
            f.write(np.ascontiguousarray(seq.images, dtype="<f4").tobytes())
    lines = [
        f"shape = {BLOCKS_PER_WINDOW}x{N_BANDS}x{GRID}x{GRID}",
        "bands = 0-7,7-14,14-49",
        "dtype = float32-le",
        f"extent = {sequences[0].grid_extent!r}" if sequences else "extent = 0.0",
        f"count = {len(sequences)}",
    ]
    for i, seq in enumerate(sequences):
        lines.append(
            f"seq {i} patient={seq.patient_id} recording={seq.recording_ref} "
            f"start_s={seq.start_s!r} label={seq.label} "
            f"straddles={int(seq.straddles_boundary)}")
    with open(stem + ".manifest.txt", "w") as f:
        f.write("\n".join(lines) + "\n")


def load_sequences(stem) -> list[ImageSequence]:
    stem = str(stem)
    meta = {}
    rows = []
    with open(stem + ".manifest.txt") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("seq "):
                fields = dict(part.split("=", 1) for part in line.split()[2:])
                rows.append(fields)
            else:
                key, _, value = line.partition(" = ")
                meta[key] = value
    expect = f"{BLOCKS_PER_WINDOW}x{N_BANDS}x{GRID}x{GRID}"
    if meta.get("shape") != expect:
        raise ValueError(f"unsupported sequence shape {meta.get('shape')!r}")
    extent = float(meta["extent"])
    raw = np.fromfile(stem + ".f32", dtype="<f4")
    frame = BLOCKS_PER_WINDOW * N_BANDS * GRID * GRID
    if raw.size != len(rows) * frame:
        raise ValueError(f"{stem}.f32 holds {raw.size} floats, "
                         f"manifest declares {len(rows) * frame}")
    out = []
    for i, fields in enumerate(rows):
        images = raw[i * frame:(i + 1) * frame].reshape(
            BLOCKS_PER_WINDOW, N_BANDS, GRID, GRID).copy()
        out.append(ImageSequence(
            images=images,
            label=int(fields["label"]),
            patient_id=fields["patient"],
            recording_ref=fields["recording"],
            start_s=float(fields["start_s"]),
            grid_extent=extent,
            straddles_boundary=bool(int(fields.get("straddles", "0"))),
        ))
    return out
