"""Spectral band magnitudes per electrode and scalp geometry.

One second of a single channel is reduced to three numbers: summed DFT
magnitude in the 0-7, 7-14 and 14-49 Hz bands (half-open intervals over the
integer-frequency bins of the 1 s block, DC excluded).  Electrode positions
come from a built-in 10-20 table on the unit sphere and are flattened with an
azimuthal equidistant ("polar") projection about the vertex, which preserves
arc distance from the vertex.  Bipolar channels ("FP1-F7") sit at the
midpoint of their electrode pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import SzDetectError

# half-open frequency bands in Hz; DC is excluded from the first
BANDS = ((0, 7), (7, 14), (14, 49))
N_BANDS = len(BANDS)
MIN_SAMPLE_RATE_HZ = 2 * BANDS[-1][1]  # keep 49 Hz below Nyquist

# common alternative names from the older 10-20 nomenclature
_SYNONYMS = {"T3": "T7", "T4": "T8", "T5": "P7", "T6": "P8"}


class WrongBlockLength(SzDetectError):
    pass


class SampleRateTooLow(SzDetectError):
    pass


class NotUnitVector(SzDetectError):
    pass


class UnknownElectrode(SzDetectError):
    pass


@dataclass
class BandMagnitudes:
    electrode: str
    bands: np.ndarray  # (3,) non-negative


def band_magnitudes_multi(blocks: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """Band magnitudes for a stack of 1 s blocks: (..., n) -> (..., 3)."""
    if sample_rate_hz < MIN_SAMPLE_RATE_HZ:
        raise SampleRateTooLow(
            f"need sample rate >= {MIN_SAMPLE_RATE_HZ} Hz, got {sample_rate_hz}")
    n = int(round(sample_rate_hz))
    blocks = np.asarray(blocks)
    if blocks.shape[-1] != n:
        raise WrongBlockLength(
            f"1 s block must have {n} samples at {sample_rate_hz} Hz, "
            f"got {blocks.shape[-1]}")
    spectrum = np.abs(np.fft.rfft(blocks.astype(np.float64), axis=-1))
    out = np.empty(blocks.shape[:-1] + (N_BANDS,))
    for b, (lo, hi) in enumerate(BANDS):
        out[..., b] = spectrum[..., max(lo, 1):hi].sum(axis=-1)
    return out


def band_magnitudes(block: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """Three-band magnitude vector of one single-channel 1 s block."""
    block = np.asarray(block)
    if block.ndim != 1:
        raise WrongBlockLength(f"expected a 1-D block, got shape {block.shape}")
    return band_magnitudes_multi(block, sample_rate_hz)


def polar_project(xyz) -> tuple[float, float]:
    """Azimuthal equidistant projection of a unit vector about the vertex.

    (u, v) = (theta*cos(phi), theta*sin(phi)) with theta the angle from the
    vertex and phi the azimuth; radial distance from the origin equals arc
    distance from the vertex.
    """
    x, y, z = (float(c) for c in xyz)
    norm = math.sqrt(x * x + y * y + z * z)
    if abs(norm - 1.0) > 1e-6:
        raise NotUnitVector(f"|({x}, {y}, {z})| = {norm}")
    theta = math.acos(min(1.0, max(-1.0, z)))
    if theta == 0.0:
        return (0.0, 0.0)
    phi = math.atan2(y, x)
    return (theta * math.cos(phi), theta * math.sin(phi))


class ElectrodeLayout:
    """Named electrode positions: 3D on the unit sphere plus 2D projections."""

    def __init__(self, positions3d: dict[str, np.ndarray]):
        self.positions3d: dict[str, np.ndarray] = {}
        self.positions2d: dict[str, np.ndarray] = {}
        for name, xyz in positions3d.items():
            xyz = np.asarray(xyz, dtype=np.float64)
            if abs(np.linalg.norm(xyz) - 1.0) > 1e-9:
                raise ValueError(f"electrode {name}: not on the unit sphere")
            self.positions3d[name.upper()] = xyz
            self.positions2d[name.upper()] = np.array(polar_project(xyz))

    @classmethod
    def from_table(cls, text: str) -> "ElectrodeLayout":
        """Parse a `name x y z` table, one electrode per line, # comments."""
        positions = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"bad layout line: {line!r}")
            positions[parts[0]] = np.array([float(p) for p in parts[1:]])
        return cls(positions)

    @property
    def names(self) -> list[str]:
        return sorted(self.positions3d)

    def electrode_position(self, name: str) -> np.ndarray:
        key = name.upper()
        key = _SYNONYMS.get(key, key)
        if key not in self.positions2d:
            raise UnknownElectrode(name)
        return self.positions2d[key]

    def max_projected_radius(self) -> float:
        return max(float(np.linalg.norm(p)) for p in self.positions2d.values())


def standard_1020() -> ElectrodeLayout:
    """The built-in idealized 10-20 layout (19 scalp electrodes)."""
    text = (resources.files("szdetect") / "layouts" / "electrodes_1020.txt").read_text()
    return ElectrodeLayout.from_table(text)


def bipolar_position(layout: ElectrodeLayout, channel_label: str) -> np.ndarray:
    """2D position of a channel: the electrode itself, or the pair midpoint."""
    label = channel_label.strip()
    try:
        return layout.electrode_position(label)
    except UnknownElectrode:
        pass
    parts = label.split("-")
    if len(parts) != 2:
        raise UnknownElectrode(label)
    a, b = (p.strip() for p in parts)
    return 0.5 * (layout.electrode_position(a) + layout.electrode_position(b))


def channel_band_magnitudes(block: np.ndarray, channel_labels: list[str],
                            sample_rate_hz: float) -> list[BandMagnitudes]:
    """Per-channel band magnitudes of one (n_channels, fs) block."""
    values = band_magnitudes_multi(block, sample_rate_hz)
    return [BandMagnitudes(lbl, values[i]) for i, lbl in enumerate(channel_labels)]
