"""End-to-end tests for the command-line pipeline.

Each subcommand is exercised in-process through ``main`` so exit codes,
stdout, and stderr stay observable; one test drives ``python3 -m szdetect``
as a subprocess to cover the module entry point.
"""

import json
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from szdetect import model as mdl
from szdetect.cli import _load_images, main
from szdetect.evaluation import REPORT_COLUMNS

SYNTH_CFG = """
n_patients = 2
hours_per_patient = 0.15
seizures_per_patient = 2
seizure_duration_s = 30, 40
seed = 9
"""

TRAIN_CFG = """
batch_size = 8
max_epochs = 1
patience_epochs = 1
seed = 0
val_fraction = 0.25
chunk_size = 8
pretrain_epochs = 1
"""

WINDOWS_PER_RECORDING = 18  # 540 s of signal, 30 s windows, 30 s stride


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth -> images -> train run shared by the read-only tests."""
    base = tmp_path_factory.mktemp("cli_pipeline")
    synth_cfg = base / "synth.cfg"
    synth_cfg.write_text(SYNTH_CFG)
    train_cfg = base / "train.cfg"
    train_cfg.write_text(TRAIN_CFG)
    corpus = base / "corpus"
    images = base / "images"
    ckpt = base / "det.ckpt"
    assert main(["synth", "--config", str(synth_cfg), "--out",
                 str(corpus)]) == 0
    assert main(["images", "--in", str(corpus), "--out", str(images)]) == 0
    assert main(["train", "--data", str(images), "--out", str(ckpt),
                 "--config", str(train_cfg), "--no-pretrain"]) == 0
    return {"base": base, "synth_cfg": synth_cfg, "train_cfg": train_cfg,
            "corpus": corpus, "images": images, "ckpt": ckpt}


def run_eval(pipeline, tmp_path, mode, **extra):
    tmp_path.mkdir(parents=True, exist_ok=True)
    report = tmp_path / f"{mode}.csv"
    argv = ["eval", "--mode", mode, "--data", str(pipeline["images"]),
            "--model", str(pipeline["ckpt"]), "--report", str(report)]
    for flag, value in extra.items():
        argv += [f"--{flag}", str(value)]
    rc = main(argv)
    return rc, report


class TestUsageErrors:
    def test_no_arguments(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["transmogrify"])
        assert exc.value.code == 2

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth"])  # --out is required
        assert exc.value.code == 2

    def test_bad_eval_mode(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--mode", "sideways", "--data", "x",
                  "--model", "y", "--report", "z"])
        assert exc.value.code == 2

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for name in ("synth", "images", "train", "eval", "occlude", "plot"):
            assert name in out


class TestSynth:
    def test_corpus_files(self, pipeline):
        names = sorted(p.name for p in pipeline["corpus"].iterdir())
        assert names == ["annotations.csv", "syn00.edf", "syn01.edf"]
        header = pipeline["corpus"].joinpath("annotations.csv") \
            .read_text().splitlines()[0]
        assert header == "recording,onset_s,offset_s"

    def test_same_seed_byte_identical(self, pipeline, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--config", str(pipeline["synth_cfg"]),
                     "--out", str(again)]) == 0
        for name in ("syn00.edf", "syn01.edf", "annotations.csv"):
            assert again.joinpath(name).read_bytes() == \
                pipeline["corpus"].joinpath(name).read_bytes()

    def test_seed_flag_changes_output(self, pipeline, tmp_path):
        other = tmp_path / "other"
        assert main(["synth", "--config", str(pipeline["synth_cfg"]),
                     "--seed", "10", "--out", str(other)]) == 0
        assert other.joinpath("syn00.edf").read_bytes() != \
            pipeline["corpus"].joinpath("syn00.edf").read_bytes()

    def test_missing_config_exits_one(self, tmp_path, capsys):
        rc = main(["synth", "--config", str(tmp_path / "nope.cfg"),
                   "--out", str(tmp_path / "out")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ")
        assert err.count("\n") == 1

    def test_bad_config_exits_one(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("n_patients = lots\n")
        rc = main(["synth", "--config", str(cfg),
                   "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "error: BadConfig:" in capsys.readouterr().err


class TestImages:
    def test_sequence_store_products(self, pipeline):
        names = {p.name for p in pipeline["images"].iterdir()}
        for stem in ("syn00", "syn01"):
            assert f"{stem}.f32" in names
            assert f"{stem}.manifest.txt" in names
        seqs, anns = _load_images(pipeline["images"])
        assert len(seqs) == 2 * WINDOWS_PER_RECORDING
        assert {s.recording_ref for s in seqs} == {"syn00", "syn01"}
        assert all(s.images.shape == (30, 3, 16, 16) for s in seqs)
        assert len(anns) == 4  # two seizures per patient

    def test_stride_flag(self, pipeline, tmp_path):
        out = tmp_path / "sparse"
        assert main(["images", "--in", str(pipeline["corpus"]),
                     "--out", str(out), "--stride", "60"]) == 0
        seqs, _ = _load_images(out)
        assert len(seqs) == 2 * 9  # floor((540 - 30) / 60) + 1

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        again = tmp_path / "again"
        assert main(["images", "--in", str(pipeline["corpus"]),
                     "--out", str(again)]) == 0
        for src in sorted(pipeline["images"].iterdir()):
            assert again.joinpath(src.name).read_bytes() == src.read_bytes()

    def test_jobs_flag_matches_serial(self, pipeline, tmp_path):
        out = tmp_path / "parallel"
        assert main(["images", "--in", str(pipeline["corpus"]),
                     "--out", str(out), "--jobs", "2"]) == 0
        for src in sorted(pipeline["images"].iterdir()):
            assert out.joinpath(src.name).read_bytes() == src.read_bytes()

    def test_empty_dir_exits_one(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["images", "--in", str(empty), "--out",
                   str(tmp_path / "out")])
        assert rc == 1
        assert "no .edf files" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_loadable(self, pipeline):
        params, norm, meta = mdl.load_checkpoint(pipeline["ckpt"])
        assert params["conv1_w"].data.ndim == 4
        assert norm is not None
        assert meta["seed"] == 0
        assert meta["member"] == 0
        assert isinstance(meta["config_hash"], str)
        assert meta["train_prior"] is not None
        assert meta["deploy_prior"] is not None

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        again = tmp_path / "again.ckpt"
        assert main(["train", "--data", str(pipeline["images"]),
                     "--out", str(again), "--config",
                     str(pipeline["train_cfg"]), "--no-pretrain"]) == 0
        assert again.read_bytes() == pipeline["ckpt"].read_bytes()

    def test_ensemble_member_suffixes(self, pipeline, tmp_path, capsys):
        out = tmp_path / "ens.ckpt"
        assert main(["train", "--data", str(pipeline["images"]),
                     "--out", str(out), "--config",
                     str(pipeline["train_cfg"]), "--no-pretrain",
                     "--ensemble", "2"]) == 0
        assert not out.exists()  # members get explicit suffixes
        m0 = mdl.load_checkpoint(f"{out}.m0")
        m1 = mdl.load_checkpoint(f"{out}.m1")
        assert m0[2]["member"] == 0 and m1[2]["member"] == 1
        assert "trained 2 member(s)" in capsys.readouterr().out

    def test_missing_data_exits_one(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "void"),
                   "--out", str(tmp_path / "x.ckpt")])
        assert rc == 1
        assert "no image sequences" in capsys.readouterr().err


class TestPretrainFinetune:
    def test_pretrain_then_init(self, pipeline, tmp_path):
        pt = tmp_path / "pre.ckpt"
        assert main(["pretrain", "--data", str(pipeline["images"]),
                     "--out", str(pt), "--config",
                     str(pipeline["train_cfg"])]) == 0
        _, norm, meta = mdl.load_checkpoint(pt)
        assert meta["purpose"] == "pretrain"
        assert norm is not None
        out = tmp_path / "warm.ckpt"
        assert main(["train", "--data", str(pipeline["images"]),
                     "--out", str(out), "--config",
                     str(pipeline["train_cfg"]), "--no-pretrain",
                     "--init", str(pt)]) == 0

    def test_finetune_produces_checkpoint(self, pipeline, tmp_path):
        out = tmp_path / "tuned.ckpt"
        assert main(["finetune", "--base", str(pipeline["ckpt"]),
                     "--patient", "syn00", "--data", str(pipeline["images"]),
                     "--out", str(out), "--config",
                     str(pipeline["train_cfg"])]) == 0
        params, norm, meta = mdl.load_checkpoint(out)
        assert params["conv1_w"].data.ndim == 4
        # finetuning reuses the base normalizer's scaling
        base_norm = mdl.load_checkpoint(pipeline["ckpt"])[1]
        np.testing.assert_array_equal(norm.mean, base_norm.mean)
        assert meta["deploy_prior"] is not None

    def test_finetune_unknown_patient_exits_one(self, pipeline, tmp_path,
                                                capsys):
        rc = main(["finetune", "--base", str(pipeline["ckpt"]),
                   "--patient", "who", "--data", str(pipeline["images"]),
                   "--out", str(tmp_path / "x.ckpt")])
        assert rc == 1
        assert "no sequences for patient" in capsys.readouterr().err


class TestEval:
    def test_holdout_report_and_summary(self, pipeline, tmp_path):
        summary = tmp_path / "summary.json"
        rc, report = run_eval(pipeline, tmp_path, "holdout",
                              summary=summary)
        assert rc == 0
        lines = report.read_text().splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS)
        assert [l.split(",")[0] for l in lines[1:]] == \
            ["syn00", "syn01", "ALL"]
        blob = json.loads(summary.read_text())
        assert set(blob["per_patient"]) == {"syn00", "syn01"}

    def test_holdout_rerun_byte_identical(self, pipeline, tmp_path):
        rc_a, first = run_eval(pipeline, tmp_path / "a", "holdout")
        rc_b, second = run_eval(pipeline, tmp_path / "b", "holdout")
        assert rc_a == rc_b == 0
        assert first.read_bytes() == second.read_bytes()

    def test_loso_mode_runs(self, pipeline, tmp_path):
        rc, report = run_eval(pipeline, tmp_path, "loso",
                              config=pipeline["train_cfg"])
        assert rc == 0
        assert report.read_text().splitlines()[-1].startswith("ALL,")

    def test_lopo_mode_runs(self, pipeline, tmp_path):
        rc, report = run_eval(pipeline, tmp_path, "lopo",
                              config=pipeline["train_cfg"])
        assert rc == 0
        lines = report.read_text().splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS)
        assert len(lines) == 4  # two patients + ALL

    def test_missing_model_exits_one(self, pipeline, tmp_path, capsys):
        rc = main(["eval", "--mode", "holdout",
                   "--data", str(pipeline["images"]),
                   "--model", str(tmp_path / "ghost.ckpt"),
                   "--report", str(tmp_path / "r.csv")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error: ")

    def test_corrupt_model_exits_one(self, pipeline, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        rc = main(["eval", "--mode", "holdout",
                   "--data", str(pipeline["images"]),
                   "--model", str(bad),
                   "--report", str(tmp_path / "r.csv")])
        assert rc == 1
        assert "error: BadMagic:" in capsys.readouterr().err


class TestOcclude:
    def test_svg_and_csv(self, pipeline, tmp_path, capsys):
        svg = tmp_path / "occ.svg"
        csv = tmp_path / "occ.csv"
        assert main(["occlude", "--model", str(pipeline["ckpt"]),
                     "--data", str(pipeline["images"]),
                     "--sequence", "syn00:0", "--out", str(svg),
                     "--csv", str(csv), "--size", "8",
                     "--occ-stride", "4"]) == 0
        root = ET.fromstring(svg.read_text())
        assert root.tag.endswith("svg")
        text = csv.read_text()
        assert text.startswith("#")
        assert "occluder_size=8" in text.splitlines()[0]
        grid = [l for l in text.splitlines() if not l.startswith("#")]
        assert len(grid) == 3  # (16 - 8) // 4 + 1 occluder rows
        assert "baseline p(seizure)=" in capsys.readouterr().out

    def test_unknown_recording_exits_one(self, pipeline, tmp_path, capsys):
        rc = main(["occlude", "--model", str(pipeline["ckpt"]),
                   "--data", str(pipeline["images"]),
                   "--sequence", "ghost:0", "--out", str(tmp_path / "o.svg")])
        assert rc == 1
        assert "no sequences for recording" in capsys.readouterr().err

    def test_bad_index_exits_one(self, pipeline, tmp_path, capsys):
        rc = main(["occlude", "--model", str(pipeline["ckpt"]),
                   "--data", str(pipeline["images"]),
                   "--sequence", "syn00:99",
                   "--out", str(tmp_path / "o.svg")])
        assert rc == 1
        assert "99" in capsys.readouterr().err


class TestAblate:
    def test_curve_csv(self, pipeline, tmp_path):
        report = tmp_path / "ablation.csv"
        assert main(["ablate-channels", "--model", str(pipeline["ckpt"]),
                     "--data", str(pipeline["corpus"]), "--max-k", "1",
                     "--reps", "1", "--seed", "0",
                     "--report", str(report)]) == 0
        lines = report.read_text().splitlines()
        assert lines[0].startswith("k_missing,event_sensitivity_mean")
        assert len(lines) == 3  # header + k=0 + k=1
        for line in lines[1:]:
            cells = line.split(",")
            assert int(cells[0]) in (0, 1)
            assert all(np.isfinite(float(c)) for c in cells[1:])


class TestPlot:
    def test_charts_written(self, pipeline, tmp_path):
        rc, report = run_eval(pipeline, tmp_path, "holdout")
        assert rc == 0
        out = tmp_path / "plots"
        assert main(["plot", "--report", str(report),
                     "--out", str(out)]) == 0
        for name in ("window_sensitivity.svg", "event_sensitivity.svg",
                     "fp_per_hour.svg"):
            root = ET.fromstring(out.joinpath(name).read_text())
            assert root.tag.endswith("svg")


class TestModuleEntry:
    def test_python_dash_m_help(self):
        proc = subprocess.run([sys.executable, "-m", "szdetect", "--help"],
                              capture_output=True, text=True,
                              cwd=Path(__file__).parent.parent)
        assert proc.returncode == 0
        assert "synth" in proc.stdout
        assert "eval" in proc.stdout

    def test_python_dash_m_usage_error(self):
        proc = subprocess.run([sys.executable, "-m", "szdetect"],
                              capture_output=True, text=True,
                              cwd=Path(__file__).parent.parent)
        assert proc.returncode == 2
        assert "usage" in proc.stderr.lower()
