"""Deterministic synthetic EEG corpus generator.

Each patient gets one recording: per-electrode scalp potentials made of
low-pass shaped Gaussian noise, plus, during scheduled seizure intervals, a
coherent rhythmic oscillation centered on a focus electrode and attenuated
exponentially with scalp distance from it.  Bipolar channels are electrode
potential differences, so the injected rhythm survives differencing except
between equidistant pairs.  Everything derives from numpy SeedSequences, so
one seed pins the corpus bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .edf_io import ChannelSignal, Recording, SeizureAnnotation, write_edf
from .errors import SzDetectError
from .montage import ElectrodeLayout, standard_1020
from .training import BadConfig


class InfeasibleSchedule(SzDetectError):
    pass


DOUBLE_BANANA = (
    "FP1-F7", "F7-T7", "T7-P7", "P7-O1",
    "FP1-F3", "F3-C3", "C3-P3", "P3-O1",
    "FP2-F4", "F4-C4", "C4-P4", "P4-O2",
    "FP2-F8", "F8-T8", "T8-P8", "P8-O2",
    "FZ-CZ", "CZ-PZ",
)

# spread over both hemispheres and front/back so patients differ
DEFAULT_FOCUS_ROTATION = ("T7", "F4", "P7", "FP2", "O1", "C3", "F8", "P4")

_SCHEDULE_GAP_S = 60.0


@dataclass
class SynthConfig:
    n_patients: int = 6
    hours_per_patient: float = 2.0
    seizures_per_patient: int = 4
    seizure_duration_s: tuple[float, float] = (30.0, 60.0)
    focus_electrodes: tuple[str, ...] = DEFAULT_FOCUS_ROTATION
    background_noise_std: float = 1.0
    seizure_frequency_hz: float = 3.0
    seizure_amplitude_gain: float = 10.0
    seed: int = 0
    sample_rate_hz: int = 256
    attenuation_scale: float = 0.35   # e-folding distance on the unit sphere
    noise_cutoff_hz: float = 45.0     # 4th-order low-pass knee of the background
    channels: tuple[str, ...] = DOUBLE_BANANA

    def __post_init__(self):
        lo, hi = self.seizure_duration_s
        if not (0 < lo <= hi):
            raise BadConfig(f"bad seizure duration range ({lo}, {hi})")
        if self.n_patients < 1 or self.seizures_per_patient < 0:
            raise BadConfig("need n_patients >= 1 and seizures_per_patient >= 0")
        if not self.focus_electrodes:
            raise BadConfig("need at least one focus electrode")


def patient_id(index: int) -> str:
    return f"syn{index:02d}"


def focus_for(config: SynthConfig, index: int) -> str:
    return config.focus_electrodes[index % len(config.focus_electrodes)]


def _electrodes_of(channels) -> list[str]:
    names: list[str] = []
    for ch in channels:
        for part in ch.split("-"):
            if part not in names:
                names.append(part)
    return names


def _schedule(config: SynthConfig, rng: np.random.Generator
              ) -> list[tuple[int, int]]:
    """Non-overlapping integer-second (onset, offset) pairs, one per slot."""
    duration_s = config.hours_per_patient * 3600.0
    n = config.seizures_per_patient
    if n == 0:
        return []
    lo, hi = config.seizure_duration_s
    slot = duration_s / n
    if slot < hi + 2 * _SCHEDULE_GAP_S:
        raise InfeasibleSchedule(
            f"{n} seizures of up to {hi} s (+{_SCHEDULE_GAP_S} s gaps) do not "
            f"fit in {duration_s} s")
    out = []
    for i in range(n):
        length = float(rng.uniform(lo, hi))
        start_room = slot - length - 2 * _SCHEDULE_GAP_S
        offset_in_slot = _SCHEDULE_GAP_S + float(rng.uniform(0, start_room))
        onset = int(round(i * slot + offset_in_slot))
        out.append((onset, onset + int(round(length))))
    return out


def _shaped_noise(rng: np.random.Generator, n: int, fs: float, std: float,
                  cutoff_hz: float) -> np.ndarray:
    white = rng.standard_normal(n)
    if std == 0.0:
        return np.zeros(n, dtype=np.float64)
    spectrum = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / fs)
    spectrum *= 1.0 / (1.0 + (f / cutoff_hz) ** 4)
    shaped = np.fft.irfft(spectrum, n=n)
    return shaped * (std / shaped.std())


def _seizure_wave(onset: int, offset: int, fs: int, freq: float, gain: float,
                  phase: float) -> np.ndarray:
    """Amplitude-``gain`` oscillation with 1 s cosine ramps at both ends."""
    n = (offset - onset) * fs
    t = np.arange(n, dtype=np.float64) / fs
    env = np.ones(n, dtype=np.float64)
    ramp = min(fs, n // 2)
    if ramp:
        up = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[:ramp] = up
        env[-ramp:] = up[::-1]
    return gain * np.sin(2.0 * np.pi * freq * t + phase) * env


def generate_patient(config: SynthConfig, index: int,
                     layout: ElectrodeLayout | None = None
                     ) -> tuple[Recording, list[SeizureAnnotation]]:
    """Build one patient's recording; independent of all other patients."""
    if layout is None:
        layout = standard_1020()
    fs = int(config.sample_rate_hz)
    n = int(round(config.hours_per_patient * 3600.0)) * fs
    pid = patient_id(index)
    rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(index,)))

    intervals = _schedule(config, rng)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(intervals))

    electrodes = _electrodes_of(config.channels)
    focus = focus_for(config, index)
    focus_pos = layout.electrode_position(focus)
    attenuation = {
        name: float(np.exp(-np.linalg.norm(layout.electrode_position(name)
                                           - focus_pos)
                           / config.attenuation_scale))
        for name in electrodes}

    potentials = np.empty((len(electrodes), n), dtype=np.float32)
    for row, name in enumerate(electrodes):
        pot = _shaped_noise(rng, n, fs, config.background_noise_std,
                            config.noise_cutoff_hz)
        for (onset, offset), phase in zip(intervals, phases):
            wave = _seizure_wave(onset, offset, fs, config.seizure_frequency_hz,
                                 config.seizure_amplitude_gain, phase)
            pot[onset * fs:offset * fs] += attenuation[name] * wave
        potentials[row] = pot

    pos_of = {name: i for i, name in enumerate(electrodes)}
    channels = []
    for label in config.channels:
        a, b = label.split("-")
        samples = potentials[pos_of[a]] - potentials[pos_of[b]]
        bound = float(np.max(np.abs(samples))) * 1.001 + 1e-6
        channels.append(ChannelSignal(
            label=label, samples=samples,
            physical_min=-bound, physical_max=bound,
            digital_min=-32768, digital_max=32767))

    rec = Recording(patient_id=pid, channels=channels,
                    sample_rate_hz=float(fs),
                    duration_s=config.hours_per_patient * 3600.0)
    anns = [SeizureAnnotation(recording_ref=pid, onset_s=float(s),
                              offset_s=float(e)) for s, e in intervals]
    return rec, anns


def generate(config: SynthConfig) -> tuple[list[Recording], list[SeizureAnnotation]]:
    layout = standard_1020()
    recordings, annotations = [], []
    for i in range(config.n_patients):
        rec, anns = generate_patient(config, i, layout)
        recordings.append(rec)
        annotations.extend(anns)
    return recordings, annotations


def export_recording(rec: Recording, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{rec.patient_id}.edf"
    path.write_bytes(write_edf(rec))
    return path


def export_annotations(annotations, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["recording,onset_s,offset_s"]
    for a in sorted(annotations, key=lambda a: (a.recording_ref, a.onset_s)):
        lines.append(f"{a.recording_ref},{a.onset_s!r},{a.offset_s!r}")
    path = out_dir / "annotations.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def export_edf(recordings, annotations, out_dir) -> list[Path]:
    """Write one EDF per recording plus annotations.csv; returns the paths."""
    paths = [export_recording(rec, out_dir) for rec in recordings]
    paths.append(export_annotations(annotations, out_dir))
    return paths


# --- config file -------------------------------------------------------------

_SCALARS = {
    "n_patients": int, "hours_per_patient": float,
    "seizures_per_patient": int, "background_noise_std": float,
    "seizure_frequency_hz": float, "seizure_amplitude_gain": float,
    "seed": int, "sample_rate_hz": int, "attenuation_scale": float,
    "noise_cutoff_hz": float,
}


def parse_synth_config(text: str) -> SynthConfig:
    """Same flat key=value format as the training config."""
    kwargs = {}
    valid = {f.name for f in fields(SynthConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in valid:
            raise BadConfig(f"line {lineno}: unknown key {key!r}")
        if key in _SCALARS:
            try:
                kwargs[key] = _SCALARS[key](value)
            except ValueError:
                raise BadConfig(f"line {lineno}: bad value for {key}: "
                                f"{value!r}") from None
        elif key == "seizure_duration_s":
            parts = value.replace(",", " ").split()
            if len(parts) != 2:
                raise BadConfig(f"line {lineno}: seizure_duration_s needs "
                                "two numbers")
            kwargs[key] = (float(parts[0]), float(parts[1]))
        elif key in ("focus_electrodes", "channels"):
            kwargs[key] = tuple(p for p in value.replace(",", " ").split() if p)
    return SynthConfig(**kwargs)
