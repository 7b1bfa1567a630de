"""Seizure detection from multi-channel scalp EEG.

Pipeline: EDF recordings are cut into 30 s windows of 30 one-second blocks;
each block becomes a 3-band spectral magnitude image interpolated onto a
16x16 scalp grid; a convolutional feature extractor feeds a bidirectional
LSTM that classifies each window; detections are scored as merged events
against expert annotations.
"""

__version__ = "0.1.0"

from .errors import SzDetectError

__all__ = ["SzDetectError", "__version__"]
