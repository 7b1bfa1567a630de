"""Segmentation of recordings into labeled 30-second windows.

Each window is 30 s of all channels; downstream stages consume it one second
at a time (30 sub-windows).  A window is labeled seizure when its interval
overlaps any annotation by more than 0 s, the strictest recall-preserving
choice.  Windows that contain a seizure boundary are flagged so experiments
can filter them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .edf_io import Recording, SeizureAnnotation
from .errors import SzDetectError

WINDOW_S = 30
BLOCKS_PER_WINDOW = 30

LABEL_NON_SEIZURE = 0
LABEL_SEIZURE = 1


class RecordingTooShort(SzDetectError):
    pass


@dataclass
class WindowSequence:
    """One 30 s labeled segment: (n_channels, 30 * sample_rate) samples."""

    recording_ref: str
    patient_id: str
    start_s: float
    samples: np.ndarray
    channel_labels: list[str]
    sample_rate_hz: float
    label: int
    straddles_boundary: bool = False

    @property
    def end_s(self) -> float:
        return self.start_s + WINDOW_S

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]


def interval_overlap(a_start: float, a_end: float, b_start: float, b_end: float) -> float:
    return min(a_end, b_end) - max(a_start, b_start)


def segment(rec: Recording, annotations: Sequence[SeizureAnnotation],
            stride_s: float = float(WINDOW_S),
            recording_ref: Optional[str] = None) -> list[WindowSequence]:
    """Cut a recording into 30 s windows at the given stride.

    The trailing partial window is discarded.  ``annotations`` are assumed to
    belong to this recording (the caller filters by recording_ref).
    """
    if stride_s <= 0:
        raise ValueError(f"stride_s must be positive: {stride_s}")
    if rec.duration_s < WINDOW_S:
        raise RecordingTooShort(
            f"recording is {rec.duration_s} s, need at least {WINDOW_S} s")
    ref = recording_ref if recording_ref is not None else rec.patient_id
    fs = rec.sample_rate_hz
    signal = rec.signal_matrix()
    window_samples = int(round(fs * WINDOW_S))

    windows = []
    n_windows = int(np.floor((rec.duration_s - WINDOW_S) / stride_s)) + 1
    for i in range(n_windows):
        start = i * stride_s
        end = start + WINDOW_S
        first = int(round(start * fs))
        label = LABEL_NON_SEIZURE
        straddles = False
        for a in annotations:
            if interval_overlap(start, end, a.onset_s, a.offset_s) > 0:
                label = LABEL_SEIZURE
                if start < a.onset_s or a.offset_s < end:
                    straddles = True
        windows.append(WindowSequence(
            recording_ref=ref,
            patient_id=rec.patient_id,
            start_s=start,
            samples=signal[:, first:first + window_samples],
            channel_labels=list(rec.channel_labels),
            sample_rate_hz=fs,
            label=label,
            straddles_boundary=straddles,
        ))
    return windows


def one_second_blocks(w: WindowSequence) -> list[np.ndarray]:
    """Split a window into its 30 consecutive 1 s blocks (channels x fs)."""
    n = int(round(w.sample_rate_hz))
    return [w.samples[:, i * n:(i + 1) * n] for i in range(BLOCKS_PER_WINDOW)]
