"""Command-line pipeline: synthesize a corpus, build image sequences, train,
evaluate, and inspect a detector.

Exit codes: 0 success; 1 any pipeline failure (one line on stderr of the
form ``error: <Kind>: <detail>``); 2 usage errors (bad flags, missing
required arguments).  Every source of randomness is pinned by --seed, and
with --jobs 1 all outputs are byte-reproducible from (inputs, seed).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import edf_io, evaluation, imaging, occlusion as occl, synth, training, viz
from . import model as mdl
from .errors import SzDetectError
from .montage import bipolar_position, standard_1020
from .imaging import CubicGridInterpolator, grid_extent_for
from .windowing import segment


# --- shared loading helpers --------------------------------------------------

def _load_annotations(dir_path: Path):
    csv = dir_path / "annotations.csv"
    if csv.exists():
        return edf_io.parse_annotations(csv.read_bytes(), "csv")
    anns = []
    for summary in sorted(dir_path.glob("*summary.txt")):
        anns.extend(edf_io.parse_annotations(summary.read_bytes(),
                                             "chbmit_summary"))
    return anns


def _load_corpus(dir_path: Path):
    """(recording_ref, Recording) pairs plus annotations from an EDF dir."""
    pairs = []
    for path in sorted(dir_path.glob("*.edf")):
        pairs.append((path.stem, edf_io.parse_edf(path.read_bytes())))
    if not pairs:
        raise SzDetectError(f"no .edf files under {dir_path}")
    return pairs, _load_annotations(dir_path)


def _load_images(dir_path: Path):
    seqs = []
    suffix = ".manifest.txt"
    for manifest in sorted(dir_path.glob(f"*{suffix}")):
        seqs.extend(imaging.load_sequences(str(manifest)[:-len(suffix)]))
    if not seqs:
        raise SzDetectError(f"no image sequences under {dir_path}")
    return seqs, _load_annotations(dir_path)


def _train_config(args) -> training.TrainConfig:
    if getattr(args, "config", None):
        config = training.parse_train_config(Path(args.config).read_text())
    else:
        config = training.TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _save_ensemble(out: str, ens: training.EnsembleModel, config,
                   histories) -> list[Path]:
    meta_common = {
        "seed": config.seed,
        "config_hash": training.config_digest(config),
        "train_prior": list(ens.train_prior) if ens.train_prior else None,
        "deploy_prior": list(ens.deploy_prior) if ens.deploy_prior else None,
    }
    paths = []
    for i, member in enumerate(ens.members):
        meta = dict(meta_common, member=i,
                    epoch=histories[i].best_epoch if histories else 0)
        path = Path(out) if len(ens.members) == 1 else Path(f"{out}.m{i}")
        mdl.save_checkpoint(path, member, ens.normalizer, meta)
        paths.append(path)
    return paths


def _load_ensemble(spec: str) -> training.EnsembleModel:
    """Comma-separated checkpoint paths form an ensemble; one path, a model."""
    members, norm, meta = [], None, None
    for path in [p for p in spec.split(",") if p]:
        member, n, m = mdl.load_checkpoint(path)
        members.append(member)
        if norm is None:
            norm, meta = n, m
    meta = meta or {}
    prior = (tuple(meta["train_prior"]) if meta.get("train_prior") else None,
             tuple(meta["deploy_prior"]) if meta.get("deploy_prior") else None)
    return training.EnsembleModel(members=members, normalizer=norm,
                                  train_prior=prior[0], deploy_prior=prior[1])


def _predictor(ens: training.EnsembleModel):
    def predict(raw_seqs):
        if not raw_seqs:
            return np.zeros((0, 2))
        pixels = np.stack([ens.normalizer.apply(s).images
                           for s in raw_seqs]).astype(np.float32)
        return training.ensemble_predict(ens, pixels)
    return predict


# --- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    config = (synth.parse_synth_config(Path(args.config).read_text())
              if args.config else synth.SynthConfig())
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    layout = standard_1020()
    annotations = []
    for i in range(config.n_patients):   # one at a time to bound memory
        rec, anns = synth.generate_patient(config, i, layout)
        synth.export_recording(rec, args.out)
        annotations.extend(anns)
    synth.export_annotations(annotations, args.out)
    print(f"wrote {config.n_patients} recordings, {len(annotations)} "
          f"seizures to {args.out}")
    return 0


def _images_worker(payload):
    edf_path, ann_blob, stride, out_stem = payload
    path = Path(edf_path)
    rec = edf_io.parse_edf(path.read_bytes())
    ref = path.stem
    anns = [a for a in edf_io.parse_annotations(ann_blob, "csv")
            if a.recording_ref == ref]
    layout = standard_1020()
    positions = np.array([bipolar_position(layout, lbl)
                          for lbl in rec.channel_labels])
    interp = CubicGridInterpolator(positions, grid_extent_for(layout))
    windows = segment(rec, anns, stride_s=stride, recording_ref=ref)
    seqs = [imaging.window_to_sequence(w, layout, interp) for w in windows]
    imaging.save_sequences(out_stem, seqs)
    return ref, len(seqs)


def cmd_images(args) -> int:
    in_dir, out_dir = Path(args.input), Path(args.out)
    edfs = sorted(in_dir.glob("*.edf"))
    if not edfs:
        raise SzDetectError(f"no .edf files under {in_dir}")
    annotations = _load_annotations(in_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ann_path = synth.export_annotations(annotations, out_dir)
    ann_blob = ann_path.read_bytes()
    payloads = [(str(p), ann_blob, args.stride, str(out_dir / p.stem))
                for p in edfs]
    results = training.pmap(_images_worker, payloads, args.jobs)
    total = sum(n for _, n in results)
    print(f"wrote {total} sequences for {len(results)} recordings to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    seqs, _ = _load_images(Path(args.data))
    config = _train_config(args)
    balanced = training.rebalance(seqs, config.target_ratio, seed=config.seed)
    norm = imaging.fit_normalizer(balanced)
    pixels, labels = training.stack_pixels([norm.apply(s) for s in balanced])
    frames = pixels.reshape(-1, mdl.N_BANDS, pixels.shape[-2], pixels.shape[-1])
    frame_labels = np.repeat(labels, mdl.SEQ_LEN)
    conv, history = training.pretrain_conv(frames, frame_labels, config)
    model = mdl.init_params(config.seed)
    training.apply_conv_weights(model, conv)
    mdl.save_checkpoint(args.out, model, norm, {
        "seed": config.seed, "config_hash": training.config_digest(config),
        "epoch": history.best_epoch, "purpose": "pretrain"})
    print(f"pretrained conv stack on {frames.shape[0]} frames "
          f"(best epoch {history.best_epoch}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    seqs, _ = _load_images(Path(args.data))
    config = _train_config(args)
    init = mdl.load_checkpoint(args.init)[0] if args.init else None
    ens, histories = training.train_detector(
        seqs, config, n_members=args.ensemble,
        pretrain=not args.no_pretrain, init=init, jobs=args.jobs)
    paths = _save_ensemble(args.out, ens, config, histories)
    accs = ",".join(f"{h.val_accuracies[h.best_epoch - 1]:.3f}"
                    for h in histories if h.best_epoch)
    print(f"trained {len(paths)} member(s), best val acc [{accs}] -> "
          + ",".join(str(p) for p in paths))
    return 0


def cmd_finetune(args) -> int:
    base = _load_ensemble(args.base)
    seqs, _ = _load_images(Path(args.data))
    patient_seqs = [s for s in seqs if s.patient_id == args.patient]
    if not patient_seqs:
        raise SzDetectError(f"no sequences for patient {args.patient!r}")
    config = _train_config(args)
    deploy_prior = training.class_prior(patient_seqs)
    balanced = training.rebalance(patient_seqs, config.target_ratio,
                                  seed=config.seed)
    train_prior = training.class_prior(balanced)
    # keep the base normalizer: the base weights expect its input scaling
    normalized = [base.normalizer.apply(s) for s in balanced]
    train_part, val_part = training.balanced_split(normalized,
                                                   config.val_fraction,
                                                   config.seed)
    members, histories = [], []
    for i, member in enumerate(base.members):
        cfg = replace(config, seed=config.seed + i)
        tuned, history = training.finetune(member, train_part, val_part, cfg)
        members.append(tuned)
        histories.append(history)
    ens = training.EnsembleModel(members=members, normalizer=base.normalizer,
                                 train_prior=train_prior,
                                 deploy_prior=deploy_prior)
    paths = _save_ensemble(args.out, ens, config, histories)
    print(f"finetuned on {len(patient_seqs)} sequences of {args.patient} -> "
          + ",".join(str(p) for p in paths))
    return 0


def cmd_eval(args) -> int:
    ens = _load_ensemble(args.model)
    seqs, annotations = _load_images(Path(args.data))
    config = _train_config(args)

    if args.mode == "holdout":
        probs = _predictor(ens)(seqs)
        predictions = evaluation._predictions_for(seqs, probs)
        report = evaluation.score(predictions, annotations)
    elif args.mode == "lopo":
        report, _, _ = evaluation.leave_one_patient_out(
            seqs, annotations, config, init=ens.members[0], jobs=args.jobs)
    else:  # loso, independently per patient
        predictions = []
        for patient in sorted({s.patient_id for s in seqs}):
            sub = [s for s in seqs if s.patient_id == patient]
            refs = {s.recording_ref for s in sub}
            sub_anns = [a for a in annotations if a.recording_ref in refs]
            _, _, preds = evaluation.leave_one_seizure_out(
                sub, sub_anns, config, init=ens.members[0], jobs=args.jobs)
            predictions.extend(preds)
        report = evaluation.score(predictions, annotations)

    Path(args.report).write_text(evaluation.report_csv(report))
    if args.summary:
        Path(args.summary).write_text(evaluation.report_summary(report))
    print(f"event sensitivity {report.event_sensitivity:.3f}, "
          f"{report.false_positive_events_per_hour:.3f} FP/h over "
          f"{report.hours_evaluated:.2f} h -> {args.report}")
    return 0


def cmd_ablate(args) -> int:
    ens = _load_ensemble(args.model)
    pairs, annotations = _load_corpus(Path(args.data))
    points = evaluation.channel_ablation_curve(
        pairs, annotations, _predictor(ens), standard_1020(),
        max_k=args.max_k, reps=args.reps, seed=args.seed or 0,
        stride_s=args.stride)
    lines = ["k_missing,event_sensitivity_mean,event_sensitivity_std,"
             "fp_per_hour_mean,fp_per_hour_std,window_sensitivity_mean"]
    for p in points:
        lines.append(f"{p.k_missing},{p.event_sensitivity_mean:.6f},"
                     f"{p.event_sensitivity_std:.6f},{p.fp_per_hour_mean:.6f},"
                     f"{p.fp_per_hour_std:.6f},{p.window_sensitivity_mean:.6f}")
    Path(args.report).write_text("\n".join(lines) + "\n")
    print(f"ablation curve over k=0..{args.max_k} -> {args.report}")
    return 0


def cmd_occlude(args) -> int:
    ens = _load_ensemble(args.model)
    seqs, _ = _load_images(Path(args.data))
    ref, _, index = args.sequence.partition(":")
    matching = [s for s in seqs if s.recording_ref == ref]
    if not matching:
        raise SzDetectError(f"no sequences for recording {ref!r}")
    try:
        seq = matching[int(index or 0)]
    except (ValueError, IndexError):
        raise SzDetectError(
            f"bad sequence index {index!r} (recording {ref!r} has "
            f"{len(matching)} sequences)") from None
    pixels = ens.normalizer.apply(seq).images

    def predict(batch):
        return training.ensemble_predict(ens, batch)

    omap = occl.occlusion_map(predict, pixels, size=args.size,
                              stride=args.occ_stride, fill=args.fill)
    layout = standard_1020()
    Path(args.out).write_text(
        occl.occlusion_svg(omap, layout, seq.grid_extent,
                           title=f"occlusion {args.sequence}"))
    if args.csv:
        Path(args.csv).write_text(occl.occlusion_csv(omap))
    ranked = occl.map_to_scalp(omap, layout, seq.grid_extent)
    top = ", ".join(f"{name}={score:.4f}" for name, score in ranked[:3])
    print(f"baseline p(seizure)={omap.baseline_prob:.4f}; top electrodes: "
          f"{top} -> {args.out}")
    return 0


def _bar_chart(title: str, labels: list[str], values: list[float],
               ceiling: float) -> str:
    bar_w, gap, margin, plot_h = 34.0, 10.0, 46.0, 160.0
    width = margin * 2 + len(labels) * (bar_w + gap)
    height = plot_h + 70.0
    top = float(max(ceiling, max(values, default=0.0), 1e-9))
    body = [viz.rect(0, 0, width, height, "white"),
            viz.text(width / 2, 20, title, size=12),
            viz.line(margin, 30 + plot_h, width - margin / 2, 30 + plot_h)]
    for i, (label, value) in enumerate(zip(labels, values)):
        x = margin + i * (bar_w + gap)
        h = 0.0 if np.isnan(value) else plot_h * value / top
        body.append(viz.rect(x, 30 + plot_h - h, bar_w, h, "rgb(70,120,190)"))
        body.append(viz.text(x + bar_w / 2, 30 + plot_h - h - 4,
                             "nan" if np.isnan(value) else f"{value:.2f}",
                             size=8))
        body.append(viz.text(x + bar_w / 2, 30 + plot_h + 14, label, size=8))
    return viz.document(width, height, body)


def cmd_plot(args) -> int:
    rows = [line.split(",") for line in
            Path(args.report).read_text().strip().splitlines()]
    header, data = rows[0], rows[1:]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [r[0] for r in data]
    made = []
    for column, ceiling in (("window_sensitivity", 1.0),
                            ("event_sensitivity", 1.0),
                            ("fp_per_hour", 0.0)):
        if column not in header:
            continue
        idx = header.index(column)
        values = [float(r[idx]) for r in data]
        path = out_dir / f"{column}.svg"
        path.write_text(_bar_chart(column.replace("_", " "), labels, values,
                                   ceiling))
        made.append(path.name)
    print(f"wrote {', '.join(made)} to {out_dir}")
    return 0


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="szdetect",
        description="Seizure detection pipeline on spectral scalp images.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, help="generate a synthetic EDF corpus")
    sp.add_argument("--config", help="key=value synth config file")
    sp.add_argument("--out", required=True, help="output corpus directory")
    sp.add_argument("--seed", type=int)

    sp = add("images", cmd_images, help="EDF corpus -> image sequence store")
    sp.add_argument("--in", dest="input", required=True,
                    help="corpus directory (.edf + annotations)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stride", type=float, default=30.0,
                    help="window stride in seconds (default 30)")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("pretrain", cmd_pretrain, help="train the conv stack on 1 s frames")
    sp.add_argument("--data", required=True, help="image sequence directory")
    sp.add_argument("--out", required=True, help="output checkpoint")
    sp.add_argument("--config", help="key=value train config file")
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, help="train the full detector")
    sp.add_argument("--data", required=True, help="image sequence directory")
    sp.add_argument("--init", help="checkpoint to initialize members from")
    sp.add_argument("--out", required=True, help="output checkpoint (members "
                    "get .mN suffixes when --ensemble > 1)")
    sp.add_argument("--ensemble", type=int, default=1)
    sp.add_argument("--no-pretrain", action="store_true",
                    help="skip the conv pretraining stage")
    sp.add_argument("--config", help="key=value train config file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("finetune", cmd_finetune, help="adapt a model to one patient")
    sp.add_argument("--base", required=True, help="base checkpoint(s)")
    sp.add_argument("--patient", required=True)
    sp.add_argument("--data", required=True, help="image sequence directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="key=value train config file")
    sp.add_argument("--seed", type=int)

    sp = add("eval", cmd_eval, help="run an evaluation protocol")
    sp.add_argument("--mode", choices=("loso", "lopo", "holdout"),
                    required=True)
    sp.add_argument("--data", required=True, help="image sequence directory")
    sp.add_argument("--model", required=True,
                    help="checkpoint path(s), comma separated")
    sp.add_argument("--report", required=True, help="output CSV path")
    sp.add_argument("--summary", help="optional structured summary path")
    sp.add_argument("--config", help="fold training config (loso/lopo)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("ablate-channels", cmd_ablate, help="missing-channel robustness")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="EDF corpus directory")
    sp.add_argument("--max-k", dest="max_k", type=int, required=True)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--stride", type=float, default=30.0)
    sp.add_argument("--report", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("occlude", cmd_occlude, help="occlusion map for one sequence")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="image sequence directory")
    sp.add_argument("--sequence", required=True,
                    help="recording_ref:index (index within that recording)")
    sp.add_argument("--out", required=True, help="output SVG path")
    sp.add_argument("--csv", help="also write the raw drop grid as CSV")
    sp.add_argument("--size", type=int, default=4)
    sp.add_argument("--occ-stride", dest="occ_stride", type=int, default=2)
    sp.add_argument("--fill", type=float, default=0.0)

    sp = add("plot", cmd_plot, help="bar charts from an eval report CSV")
    sp.add_argument("--report", required=True)
    sp.add_argument("--out", required=True, help="output directory")

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SzDetectError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
