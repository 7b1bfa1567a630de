"""EDF (European Data Format) reading/writing and seizure annotation parsing.

Plain EDF only: a 256-byte ASCII main header, 256 bytes of per-signal header
fields stored field-major, then data records of 16-bit little-endian
two's-complement samples.  EDF+ TAL annotation channels are not interpreted;
seizure labels live in sidecar files (CSV or CHB-MIT summary text).
"""

from __future__ import annotations

import datetime
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import SzDetectError


class MalformedHeader(SzDetectError):
    pass


class TruncatedRecords(SzDetectError):
    pass


class ZeroCalibrationRange(SzDetectError):
    pass


class NonuniformSampleRate(SzDetectError):
    pass


class NegativeOnset(SzDetectError):
    pass


class OffsetBeforeOnset(SzDetectError):
    pass


class UnparseableLine(SzDetectError):
    pass


@dataclass
class ChannelSignal:
    """One calibrated signal: physical samples plus its calibration ranges."""

    label: str
    samples: np.ndarray  # float32, microvolts (or header physical unit)
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int


@dataclass
class Recording:
    """A multi-channel recording with a single sample rate."""

    patient_id: str
    channels: list[ChannelSignal]
    sample_rate_hz: float
    duration_s: float
    start_time: Optional[datetime.datetime] = None

    @property
    def channel_labels(self) -> list[str]:
        return [c.label for c in self.channels]

    def signal_matrix(self) -> np.ndarray:
        """All channels stacked as (n_channels, n_samples)."""
        return np.stack([c.samples for c in self.channels])


@dataclass(frozen=True, order=True)
class SeizureAnnotation:
    """A seizure interval [onset_s, offset_s) within one recording."""

    recording_ref: str = field(compare=False)
    onset_s: float
    offset_s: float


def calibrate(digital, digital_min, digital_max, physical_min, physical_max):
    """Affine digital-to-physical mapping used by EDF."""
    scale = (physical_max - physical_min) / (digital_max - digital_min)
    return (np.asarray(digital, dtype=np.float64) - digital_min) * scale + physical_min


_MAIN_FIELDS = (8, 80, 80, 8, 8, 8, 44, 8, 8, 4)  # EDF main header layout


def _ascii(raw: bytes, what: str) -> str:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise MalformedHeader(f"non-ASCII bytes in {what}") from None
    return text.strip()


def _int_field(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise MalformedHeader(f"unparseable integer {what}: {text!r}") from None


def _float_field(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise MalformedHeader(f"unparseable number {what}: {text!r}") from None


def parse_edf(data: bytes, channels: Optional[Sequence[str]] = None) -> Recording:
    """Parse EDF bytes into a calibrated Recording.

    ``channels`` optionally restricts the result to the given labels (the
    scalp montage never uses non-EEG rows, but clinical files often carry
    extras such as ECG).
    Duplicate labels keep their first occurrence so Recording labels stay
    unique.  All kept signals must share one sample rate.
    """
    if len(data) < 256:
        raise MalformedHeader(f"stream too short for main header: {len(data)} bytes")
    pos = 0
    fields = []
    for width in _MAIN_FIELDS:
        fields.append(_ascii(data[pos:pos + width], f"main header at byte {pos}"))
        pos += width
    version, patient, _recording_id, startdate, starttime, hdr_bytes, _resv, n_rec, rec_dur, n_sig = fields

    if version != "0":
        raise MalformedHeader(f"unsupported EDF version field: {version!r}")
    n_signals = _int_field(n_sig, "signal count")
    if n_signals <= 0:
        raise MalformedHeader(f"signal count must be positive: {n_signals}")
    n_records = _int_field(n_rec, "record count")
    if n_records < 0:
        raise MalformedHeader(f"record count must be non-negative: {n_records}")
    record_duration = _float_field(rec_dur, "record duration")
    if record_duration <= 0:
        raise MalformedHeader(f"record duration must be positive: {record_duration}")
    declared_header = _int_field(hdr_bytes, "header size")
    expected_header = 256 + 256 * n_signals
    if declared_header != expected_header:
        raise MalformedHeader(
            f"header size {declared_header} != 256 + 256*{n_signals}")
    if len(data) < expected_header:
        raise MalformedHeader("stream ends inside signal headers")

    def sig_fields(width: int, what: str) -> list[str]:
        nonlocal pos
        out = []
        for i in range(n_signals):
            out.append(_ascii(data[pos:pos + width], f"{what}[{i}]"))
            pos += width
        return out

    labels = sig_fields(16, "label")
    sig_fields(80, "transducer")
    sig_fields(8, "physical dimension")
    phys_min = [_float_field(v, "physical min") for v in sig_fields(8, "physical min")]
    phys_max = [_float_field(v, "physical max") for v in sig_fields(8, "physical max")]
    dig_min = [_int_field(v, "digital min") for v in sig_fields(8, "digital min")]
    dig_max = [_int_field(v, "digital max") for v in sig_fields(8, "digital max")]
    sig_fields(80, "prefiltering")
    samples_per_rec = [_int_field(v, "samples per record")
                       for v in sig_fields(8, "samples per record")]
    sig_fields(32, "signal reserved")

    for i in range(n_signals):
        if dig_min[i] == dig_max[i]:
            raise ZeroCalibrationRange(f"signal {labels[i]!r}: digital range is empty")
        if dig_min[i] > dig_max[i]:
            raise MalformedHeader(f"signal {labels[i]!r}: digital_min > digital_max")
        if samples_per_rec[i] <= 0:
            raise MalformedHeader(f"signal {labels[i]!r}: bad samples per record")

    record_size = 2 * sum(samples_per_rec)
    data_len = len(data) - expected_header
    if data_len < n_records * record_size:
        raise TruncatedRecords(
            f"header declares {n_records} records ({n_records * record_size} bytes), "
            f"stream holds {data_len}")

    raw = np.frombuffer(data, dtype="<i2",
                        count=n_records * record_size // 2, offset=expected_header)
    # record-major layout: slice each signal's block out of every record
    offsets = np.concatenate([[0], np.cumsum(samples_per_rec)])
    per_record = offsets[-1]

    wanted = None if channels is None else {c.upper() for c in channels}
    seen: set[str] = set()
    out_channels: list[ChannelSignal] = []
    rates: set[float] = set()
    for i, label in enumerate(labels):
        if label in seen:
            continue
        seen.add(label)
        if wanted is not None and label.upper() not in wanted:
            continue
        block = raw.reshape(n_records, per_record)[:, offsets[i]:offsets[i + 1]]
        physical = calibrate(block.reshape(-1), dig_min[i], dig_max[i],
                             phys_min[i], phys_max[i])
        out_channels.append(ChannelSignal(
            label=label,
            samples=physical.astype(np.float32),
            physical_min=phys_min[i],
            physical_max=phys_max[i],
            digital_min=dig_min[i],
            digital_max=dig_max[i],
        ))
        rates.add(samples_per_rec[i] / record_duration)

    if not out_channels:
        raise MalformedHeader("no channels left after selection")
    if len(rates) > 1:
        raise NonuniformSampleRate(f"mixed sample rates: {sorted(rates)}")

    return Recording(
        patient_id=patient,
        channels=out_channels,
        sample_rate_hz=rates.pop(),
        duration_s=n_records * record_duration,
        start_time=_parse_start(startdate, starttime),
    )


def _parse_start(startdate: str, starttime: str) -> Optional[datetime.datetime]:
    m = re.fullmatch(r"(\d{2})\.(\d{2})\.(\d{2})", startdate)
    t = re.fullmatch(r"(\d{2})\.(\d{2})\.(\d{2})", starttime)
    if not (m and t):
        return None
    day, month, yy = (int(g) for g in m.groups())
    year = 1900 + yy if yy >= 85 else 2000 + yy
    try:
        return datetime.datetime(year, month, day, *(int(g) for g in t.groups()))
    except ValueError:
        return None


def _fit8(value: float) -> str:
    """Shortest representation of value that fits an 8-char EDF field."""
    for precision in range(8, 0, -1):
        text = f"{value:.{precision}g}"
        if len(text) <= 8 and "e" not in text and "E" not in text:
            return text
    return f"{value:.1e}"[:8]


def write_edf(rec: Recording, record_duration_s: float = 1.0) -> bytes:
    """Serialize a Recording as minimal conformant EDF bytes.

    Samples are re-quantized to each channel's digital range, so a parse of
    the output matches the input within one quantization step.
    """
    spr = rec.sample_rate_hz * record_duration_s
    if abs(spr - round(spr)) > 1e-9:
        raise ValueError("sample_rate_hz * record_duration_s must be integral")
    spr = int(round(spr))
    n_records = int(round(rec.duration_s / record_duration_s))
    if abs(n_records * record_duration_s - rec.duration_s) > 1e-9:
        raise ValueError("duration_s must be a whole number of records")

    if rec.start_time is not None:
        startdate = rec.start_time.strftime("%d.%m.%y")
        starttime = rec.start_time.strftime("%H.%M.%S")
    else:
        startdate, starttime = "01.01.00", "00.00.00"

    n_signals = len(rec.channels)
    header = "".join(f"{v:<{w}}" for v, w in (
        ("0", 8),
        (rec.patient_id[:80], 80),
        ("", 80),
        (startdate, 8),
        (starttime, 8),
        (str(256 + 256 * n_signals), 8),
        ("", 44),
        (str(n_records), 8),
        (_fit8(record_duration_s), 8),
        (str(n_signals), 4),
    ))

    # re-parse the 8-char physical bounds so quantization matches what a
    # reader will reconstruct from the written header
    pmin = [float(_fit8(c.physical_min)) for c in rec.channels]
    pmax = [float(_fit8(c.physical_max)) for c in rec.channels]

    def col(fmt_width: int, values) -> str:
        return "".join(f"{v:<{fmt_width}}" for v in values)

    header += col(16, (c.label[:16] for c in rec.channels))
    header += col(80, ("" for _ in rec.channels))
    header += col(8, ("uV" for _ in rec.channels))
    header += col(8, (_fit8(v) for v in pmin))
    header += col(8, (_fit8(v) for v in pmax))
    header += col(8, (c.digital_min for c in rec.channels))
    header += col(8, (c.digital_max for c in rec.channels))
    header += col(80, ("" for _ in rec.channels))
    header += col(8, (spr for _ in rec.channels))
    header += col(32, ("" for _ in rec.channels))
    blob = header.encode("ascii")

    digital = np.empty((n_signals, n_records * spr), dtype="<i2")
    for i, ch in enumerate(rec.channels):
        lo, hi = pmin[i], pmax[i]
        scale = (ch.digital_max - ch.digital_min) / (hi - lo)
        q = np.rint((np.asarray(ch.samples, dtype=np.float64) - lo) * scale
                    + ch.digital_min)
        digital[i] = np.clip(q, ch.digital_min, ch.digital_max).astype("<i2")

    # interleave per record: rec0[sig0 sig1 ...] rec1[...]
    records = digital.reshape(n_signals, n_records, spr).transpose(1, 0, 2)
    return blob + records.tobytes()


_SUMMARY_FILE = re.compile(r"^\s*File Name\s*:\s*(\S+)", re.IGNORECASE)
_SUMMARY_START = re.compile(
    r"^\s*Seizure(?:\s+\d+)?\s+Start\s+Time\s*:\s*([0-9.]+)\s*sec", re.IGNORECASE)
_SUMMARY_END = re.compile(
    r"^\s*Seizure(?:\s+\d+)?\s+End\s+Time\s*:\s*([0-9.]+)\s*sec", re.IGNORECASE)


def parse_annotations(data: bytes, format: str = "csv") -> list[SeizureAnnotation]:
    """Parse seizure annotations from CSV or CHB-MIT summary text.

    CSV rows are ``recording,onset_s,offset_s`` (an optional header row with
    those names is skipped).  The summary format is the dataset's per-patient
    ``*-summary.txt`` listing "Seizure Start Time"/"Seizure End Time" under
    each "File Name:" entry.  Output is sorted by onset.
    """
    text = data.decode("utf-8", errors="replace")
    if format == "csv":
        anns = _parse_csv(text)
    elif format == "chbmit_summary":
        anns = _parse_summary(text)
    else:
        raise ValueError(f"unknown annotation format: {format!r}")
    for a in anns:
        if a.onset_s < 0:
            raise NegativeOnset(f"{a.recording_ref}: onset {a.onset_s} < 0")
        if a.offset_s <= a.onset_s:
            raise OffsetBeforeOnset(
                f"{a.recording_ref}: offset {a.offset_s} <= onset {a.onset_s}")
    return sorted(anns, key=lambda a: (a.onset_s, a.offset_s, a.recording_ref))


def _parse_csv(text: str) -> list[SeizureAnnotation]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if lineno == 1 and line.replace(" ", "") == "recording,onset_s,offset_s":
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise UnparseableLine(f"line {lineno}: expected 3 fields, got {len(parts)}")
        try:
            onset, offset = float(parts[1]), float(parts[2])
        except ValueError:
            raise UnparseableLine(f"line {lineno}: non-numeric onset/offset") from None
        out.append(SeizureAnnotation(parts[0], onset, offset))
    return out


def _parse_summary(text: str) -> list[SeizureAnnotation]:
    out = []
    current: Optional[str] = None
    pending: Optional[float] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _SUMMARY_FILE.match(line)
        if m:
            if pending is not None:
                raise UnparseableLine(f"line {lineno}: seizure start without end")
            current = m.group(1)
            if current.lower().endswith(".edf"):
                current = current[:-4]
            continue
        m = _SUMMARY_START.match(line)
        if m:
            if current is None:
                raise UnparseableLine(f"line {lineno}: seizure time before any file name")
            if pending is not None:
                raise UnparseableLine(f"line {lineno}: two starts without an end")
            pending = float(m.group(1))
            continue
        m = _SUMMARY_END.match(line)
        if m:
            if pending is None:
                raise UnparseableLine(f"line {lineno}: seizure end without start")
            out.append(SeizureAnnotation(current, pending, float(m.group(1))))
            pending = None
    if pending is not None:
        raise UnparseableLine("summary ends with an unmatched seizure start")
    return out
