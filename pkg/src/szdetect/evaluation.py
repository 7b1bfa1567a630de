"""Detection metrics and cross-validation protocols.

Window-level counts come straight from per-window labels.  Event-level
metrics merge runs of positive windows into detection events; a seizure
counts as detected when any event overlaps it, and an event counts as a
false positive when it overlaps no seizure and sits outside a guard band
(default 30 s, configurable) around every seizure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SzDetectError
from .edf_io import SeizureAnnotation
from .windowing import interval_overlap


class EmptyPredictions(SzDetectError):
    pass


class NotEnoughFolds(SzDetectError):
    pass


DEFAULT_GUARD_BAND_S = 30.0


@dataclass(frozen=True)
class WindowPrediction:
    patient_id: str
    recording_ref: str
    start_s: float
    end_s: float
    label: int
    predicted: int
    p_seizure: float


@dataclass(frozen=True)
class DetectionEvent:
    recording_ref: str
    start_s: float
    end_s: float


@dataclass
class EvalReport:
    window_sensitivity: float
    event_sensitivity: float
    false_positive_events_per_hour: float
    hours_evaluated: float
    tp_windows: int
    fn_windows: int
    fp_windows: int
    tn_windows: int
    seizures_total: int
    seizures_detected: int
    fp_events: int
    per_patient: dict[str, "EvalReport"] = field(default_factory=dict)


def merge_intervals(intervals) -> list[tuple[float, float]]:
    """Union of (start, end) intervals; touching intervals fuse.  Idempotent."""
    merged: list[tuple[float, float]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def merge_events(predictions) -> list[DetectionEvent]:
    """Merge consecutive positive windows of each recording into events."""
    by_rec: dict[str, list[tuple[float, float]]] = {}
    for p in predictions:
        if p.predicted == 1:
            by_rec.setdefault(p.recording_ref, []).append((p.start_s, p.end_s))
    events = []
    for rec in sorted(by_rec):
        events.extend(DetectionEvent(rec, s, e)
                      for s, e in merge_intervals(by_rec[rec]))
    return events


def _score_flat(predictions, annotations, hours_evaluated: float,
                guard_band_s: float) -> EvalReport:
    tp = sum(1 for p in predictions if p.label == 1 and p.predicted == 1)
    fn = sum(1 for p in predictions if p.label == 1 and p.predicted == 0)
    fp = sum(1 for p in predictions if p.label == 0 and p.predicted == 1)
    tn = sum(1 for p in predictions if p.label == 0 and p.predicted == 0)

    events = merge_events(predictions)
    by_rec_events: dict[str, list[DetectionEvent]] = {}
    for ev in events:
        by_rec_events.setdefault(ev.recording_ref, []).append(ev)

    detected = 0
    for ann in annotations:
        hits = by_rec_events.get(ann.recording_ref, [])
        if any(interval_overlap(ev.start_s, ev.end_s, ann.onset_s,
                                ann.offset_s) > 0 for ev in hits):
            detected += 1

    by_rec_anns: dict[str, list[SeizureAnnotation]] = {}
    for ann in annotations:
        by_rec_anns.setdefault(ann.recording_ref, []).append(ann)
    fp_events = 0
    for ev in events:
        anns = by_rec_anns.get(ev.recording_ref, [])
        if any(interval_overlap(ev.start_s, ev.end_s, a.onset_s,
                                a.offset_s) > 0 for a in anns):
            continue
        if any(interval_overlap(ev.start_s, ev.end_s,
                                a.onset_s - guard_band_s,
                                a.offset_s + guard_band_s) > 0 for a in anns):
            continue  # guard band: near-miss around a true seizure, not an FP
        fp_events += 1

    n_seiz = len(annotations)
    return EvalReport(
        window_sensitivity=tp / (tp + fn) if tp + fn else math.nan,
        event_sensitivity=detected / n_seiz if n_seiz else math.nan,
        false_positive_events_per_hour=(fp_events / hours_evaluated
                                        if hours_evaluated > 0 else math.nan),
        hours_evaluated=hours_evaluated,
        tp_windows=tp, fn_windows=fn, fp_windows=fp, tn_windows=tn,
        seizures_total=n_seiz, seizures_detected=detected,
        fp_events=fp_events)


def covered_hours(predictions) -> float:
    """Total recording time covered by the prediction windows (union)."""
    by_rec: dict[str, list[tuple[float, float]]] = {}
    for p in predictions:
        by_rec.setdefault(p.recording_ref, []).append((p.start_s, p.end_s))
    seconds = sum(e - s for rec in by_rec.values()
                  for s, e in merge_intervals(rec))
    return seconds / 3600.0


def score(predictions, annotations, hours_evaluated: float | None = None,
          guard_band_s: float = DEFAULT_GUARD_BAND_S) -> EvalReport:
    """Aggregate window and event metrics over any set of predictions.

    Only annotations of recordings present in the predictions are counted,
    so fold-local scoring needs no pre-filtering.  hours_evaluated defaults
    to the time covered by the windows themselves.
    """
    predictions = list(predictions)
    if not predictions:
        raise EmptyPredictions("nothing to score")
    covered = {p.recording_ref for p in predictions}
    annotations = [a for a in annotations if a.recording_ref in covered]
    if hours_evaluated is None:
        hours_evaluated = covered_hours(predictions)

    report = _score_flat(predictions, annotations, hours_evaluated,
                         guard_band_s)
    for patient in sorted({p.patient_id for p in predictions}):
        sub = [p for p in predictions if p.patient_id == patient]
        sub_recs = {p.recording_ref for p in sub}
        sub_anns = [a for a in annotations if a.recording_ref in sub_recs]
        report.per_patient[patient] = _score_flat(
            sub, sub_anns, covered_hours(sub), guard_band_s)
    return report


# --- fold bookkeeping -------------------------------------------------------

@dataclass
class Fold:
    name: str
    train_idx: list[int]
    test_idx: list[int]


def _assigned_seizure(seq, annotations) -> int | None:
    """Index of the annotation this (positive) window belongs to: the one
    with maximum overlap, earliest on ties."""
    best, best_ov = None, 0.0
    for i, ann in enumerate(annotations):
        if ann.recording_ref != seq.recording_ref:
            continue
        ov = interval_overlap(seq.start_s, seq.start_s + 30.0,
                              ann.onset_s, ann.offset_s)
        if ov > best_ov:
            best, best_ov = i, ov
    return best


def loso_folds(seqs, annotations, seed: int = 0) -> list[Fold]:
    """One fold per seizure: its windows are the positive test set and the
    negative windows are partitioned across folds (seeded, disjoint)."""
    annotations = sorted(annotations, key=lambda a: (a.recording_ref, a.onset_s))
    n = len(annotations)
    if n == 0:
        raise NotEnoughFolds("no seizures, no folds")
    owners = [[] for _ in range(n)]
    negatives = []
    for i, s in enumerate(seqs):
        if s.label == 1:
            owner = _assigned_seizure(s, annotations)
            if owner is None:
                # labeled positive but matching no annotation here: treat as
                # negative background for fold purposes
                negatives.append(i)
            else:
                owners[owner].append(i)
        else:
            negatives.append(i)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(negatives))
    neg_parts = np.array_split(order, n)

    folds = []
    all_idx = set(range(len(seqs)))
    for f in range(n):
        test = sorted(owners[f] + [negatives[i] for i in neg_parts[f]])
        train = sorted(all_idx - set(test))
        folds.append(Fold(name=f"seizure_{f}", train_idx=train, test_idx=test))
    return folds


def lopo_folds(seqs) -> list[Fold]:
    """One fold per patient; the held-out patient contributes nothing to
    training (data or statistics)."""
    patients = sorted({s.patient_id for s in seqs})
    if len(patients) < 2:
        raise NotEnoughFolds(f"leave-one-patient-out needs >= 2 patients, "
                             f"got {len(patients)}")
    folds = []
    for patient in patients:
        test = [i for i, s in enumerate(seqs) if s.patient_id == patient]
        train = [i for i, s in enumerate(seqs) if s.patient_id != patient]
        folds.append(Fold(name=patient, train_idx=train, test_idx=test))
    return folds


# --- protocol runners -------------------------------------------------------

def default_train_fn(config, n_members: int = 1, pretrain: bool = False,
                     init=None):
    """Returns train_fn(train_seqs) -> predict(raw_seqs) -> (n, 2) probs."""
    from .training import train_detector, ensemble_predict

    def train_fn(train_seqs):
        ens, _ = train_detector(train_seqs, config, n_members=n_members,
                                pretrain=pretrain, init=init)

        def predict(raw_seqs):
            pixels = np.stack([ens.normalizer.apply(s).images
                               for s in raw_seqs]).astype(np.float32)
            return ensemble_predict(ens, pixels)

        return predict

    return train_fn


def _predictions_for(test, probs) -> list[WindowPrediction]:
    return [WindowPrediction(
        patient_id=s.patient_id, recording_ref=s.recording_ref,
        start_s=s.start_s, end_s=s.start_s + 30.0, label=s.label,
        predicted=int(p[1] > p[0]), p_seizure=float(p[1]))
        for s, p in zip(test, probs)]


def _fold_worker(payload) -> list[WindowPrediction]:
    """Top-level (picklable) per-fold train + predict."""
    train_seqs, test_seqs, config, n_members, pretrain, init = payload
    predict = default_train_fn(config, n_members, pretrain, init)(train_seqs)
    return _predictions_for(test_seqs, predict(test_seqs))


def run_folds(seqs, annotations, folds, config=None, train_fn=None,
              n_members: int = 1, pretrain: bool = False, init=None,
              jobs: int = 1, guard_band_s: float = DEFAULT_GUARD_BAND_S
              ) -> tuple[EvalReport, list[WindowPrediction]]:
    """Train per fold, predict its test windows, score the union.

    A custom ``train_fn(train_seqs) -> predict`` runs serially; the default
    pipeline parallelizes across folds when jobs > 1 (folds are independent
    and results are combined in fold order, so output does not depend on
    jobs).
    """
    if train_fn is not None:
        predictions = []
        for fold in folds:
            predict = train_fn([seqs[i] for i in fold.train_idx])
            test = [seqs[i] for i in fold.test_idx]
            predictions.extend(_predictions_for(test, predict(test)))
    else:
        from .training import pmap
        payloads = [([seqs[i] for i in fold.train_idx],
                     [seqs[i] for i in fold.test_idx],
                     config, n_members, pretrain, init) for fold in folds]
        predictions = [p for preds in pmap(_fold_worker, payloads, jobs)
                       for p in preds]
    report = score(predictions, annotations, guard_band_s=guard_band_s)
    return report, predictions


def leave_one_seizure_out(seqs, annotations, config, n_members: int = 1,
                          pretrain: bool = False, train_fn=None, init=None,
                          jobs: int = 1,
                          guard_band_s: float = DEFAULT_GUARD_BAND_S):
    folds = loso_folds(seqs, annotations, seed=config.seed)
    report, predictions = run_folds(
        seqs, annotations, folds, config=config, train_fn=train_fn,
        n_members=n_members, pretrain=pretrain, init=init, jobs=jobs,
        guard_band_s=guard_band_s)
    return report, folds, predictions


def leave_one_patient_out(seqs, annotations, config, n_members: int = 1,
                          pretrain: bool = False, train_fn=None, init=None,
                          jobs: int = 1,
                          guard_band_s: float = DEFAULT_GUARD_BAND_S):
    folds = lopo_folds(seqs)
    report, predictions = run_folds(
        seqs, annotations, folds, config=config, train_fn=train_fn,
        n_members=n_members, pretrain=pretrain, init=init, jobs=jobs,
        guard_band_s=guard_band_s)
    return report, folds, predictions


# --- missing-channel robustness ---------------------------------------------

@dataclass
class AblationPoint:
    k_missing: int
    event_sensitivity_mean: float
    event_sensitivity_std: float
    fp_per_hour_mean: float
    fp_per_hour_std: float
    window_sensitivity_mean: float


def channel_ablation_curve(recordings, annotations, predict, layout,
                           max_k: int, reps: int = 3, seed: int = 0,
                           stride_s: float = 30.0,
                           guard_band_s: float = DEFAULT_GUARD_BAND_S
                           ) -> list[AblationPoint]:
    """Drop k random channels everywhere, rebuild images, rescore.

    ``recordings`` is a list of (recording_ref, Recording) pairs so the
    annotations can be matched per recording.  ``predict`` maps raw
    (un-normalized) ImageSequences to (n, 2) probabilities.  k = 0 is the
    exact baseline (single repetition).
    """
    from .imaging import window_to_sequence
    from .windowing import segment

    n_channels = len(recordings[0][1].channel_labels)
    if max_k > n_channels - 3:
        raise NotEnoughFolds(f"can drop at most {n_channels - 3} of "
                             f"{n_channels} channels")
    rng = np.random.default_rng(seed)
    points = []
    for k in range(max_k + 1):
        sens, fprs, wsens = [], [], []
        for _ in range(1 if k == 0 else reps):
            drop = set(rng.choice(n_channels, size=k, replace=False).tolist())
            predictions = []
            for ref, rec in recordings:
                keep = [lbl for i, lbl in enumerate(rec.channel_labels)
                        if i not in drop]
                sub = _select_channels(rec, keep)
                rec_anns = [a for a in annotations if a.recording_ref == ref]
                windows = segment(sub, rec_anns, stride_s=stride_s,
                                  recording_ref=ref)
                seqs = [window_to_sequence(w, layout) for w in windows]
                probs = predict(seqs)
                for s, p in zip(seqs, probs):
                    predictions.append(WindowPrediction(
                        patient_id=s.patient_id,
                        recording_ref=s.recording_ref, start_s=s.start_s,
                        end_s=s.start_s + 30.0, label=s.label,
                        predicted=int(p[1] > p[0]), p_seizure=float(p[1])))
            rep = score(predictions, annotations, guard_band_s=guard_band_s)
            sens.append(rep.event_sensitivity)
            fprs.append(rep.false_positive_events_per_hour)
            wsens.append(rep.window_sensitivity)
        points.append(AblationPoint(
            k_missing=k,
            event_sensitivity_mean=float(np.mean(sens)),
            event_sensitivity_std=float(np.std(sens)),
            fp_per_hour_mean=float(np.mean(fprs)),
            fp_per_hour_std=float(np.std(fprs)),
            window_sensitivity_mean=float(np.nanmean(wsens))))
    return points


def _select_channels(rec, keep_labels):
    from .edf_io import Recording

    wanted = set(keep_labels)
    return Recording(
        patient_id=rec.patient_id,
        channels=[c for c in rec.channels if c.label in wanted],
        sample_rate_hz=rec.sample_rate_hz,
        duration_s=rec.duration_s,
        start_time=rec.start_time)


# --- report output ----------------------------------------------------------

REPORT_COLUMNS = ("patient", "windows", "positive_windows",
                  "window_sensitivity", "seizures_total", "seizures_detected",
                  "event_sensitivity", "fp_events", "hours_evaluated",
                  "fp_per_hour")


def _fmt(x: float) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def _report_row(name: str, r: EvalReport) -> str:
    return ",".join([
        name, str(r.tp_windows + r.fn_windows + r.fp_windows + r.tn_windows),
        str(r.tp_windows + r.fn_windows), _fmt(r.window_sensitivity),
        str(r.seizures_total), str(r.seizures_detected),
        _fmt(r.event_sensitivity), str(r.fp_events),
        _fmt(r.hours_evaluated), _fmt(r.false_positive_events_per_hour)])


def report_csv(report: EvalReport) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for patient in sorted(report.per_patient):
        lines.append(_report_row(patient, report.per_patient[patient]))
    lines.append(_report_row("ALL", report))
    return "\n".join(lines) + "\n"


def report_summary(report: EvalReport) -> str:
    def flat(r: EvalReport) -> dict:
        d = {k: v for k, v in vars(r).items() if k != "per_patient"}
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in d.items()}

    payload = flat(report)
    payload["per_patient"] = {k: flat(v)
                              for k, v in sorted(report.per_patient.items())}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
