"""End-to-end command-line behavior: files written, exit codes, overrides."""

import numpy as np
import pytest
from PIL import Image

from cacps.checkpoint import load_checkpoint
from cacps.cli import main
from cacps.report import read_train_rows

TINY = [
    "--base-width", "4", "--depth", "2", "--crop", "16", "--image-size", "32",
    "--batch-size", "4", "--n-subjects", "4", "--labeled-fraction", "0.5",
    "--aug-flip", "false", "--aug-rotation", "false", "--aug-scaling", "false",
    "--aug-random-crop", "false",
]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("CACPS_OUTPUT_DIR", raising=False)


def write_png(path, arr8):
    Image.fromarray(arr8.astype(np.uint8)).save(path)


# -- synth ------------------------------------------------------------------


def test_synth_writes_corpus_and_manifest(tmp_path):
    out = tmp_path / "o"
    rc = main(["synth", "--output-dir", str(out), "--n-subjects", "2",
               "--image-size", "16"])
    assert rc == 0
    corpus = out / "corpus"
    domains = sorted(p.name for p in corpus.iterdir() if p.is_dir())
    assert domains == ["A", "B", "C", "D"]
    assert (corpus / "manifest.txt").is_file()
    subjects = list((corpus / "B").iterdir())
    assert len(subjects) == 2


def test_synth_rerun_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth", "--output-dir", str(out), "--n-subjects", "2",
                     "--image-size", "16"]) == 0
    rel = "corpus/A/subject_000/image_000.png"
    assert (a / rel).read_bytes() == (b / rel).read_bytes()
    assert (a / "corpus/manifest.txt").read_text() == (b / "corpus/manifest.txt").read_text()


def test_env_var_overrides_output_dir(tmp_path, monkeypatch):
    envdir = tmp_path / "from_env"
    monkeypatch.setenv("CACPS_OUTPUT_DIR", str(envdir))
    assert main(["synth", "--n-subjects", "2", "--image-size", "16"]) == 0
    assert (envdir / "corpus").is_dir()


# -- augment ----------------------------------------------------------------


def test_augment_lambda_zero_is_identity_within_quantization(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.integers(30, 220, size=(16, 16))
    p = rng.integers(30, 220, size=(16, 16))
    write_png(tmp_path / "x.png", x)
    write_png(tmp_path / "p.png", p)
    out = tmp_path / "z.png"
    rc = main(["augment", str(tmp_path / "x.png"), str(tmp_path / "p.png"),
               str(out), "--lam", "0", "--mode", "rectified"])
    assert rc == 0
    z = np.asarray(Image.open(out)).astype(np.float64) / 65535.0
    assert np.max(np.abs(z - x / 255.0)) < 1e-4


def test_augment_is_reproducible_and_renders_spectra(tmp_path):
    rng = np.random.default_rng(1)
    write_png(tmp_path / "x.png", rng.integers(0, 255, size=(16, 16)))
    write_png(tmp_path / "p.png", rng.integers(0, 255, size=(16, 16)))
    argv = ["augment", str(tmp_path / "x.png"), str(tmp_path / "p.png"),
            str(tmp_path / "z.png"), "--lam", "0.8", "--spectra",
            str(tmp_path / "panels.png")]
    assert main(argv) == 0
    first = (tmp_path / "z.png").read_bytes()
    assert main(argv) == 0
    assert (tmp_path / "z.png").read_bytes() == first
    assert (tmp_path / "panels.png").stat().st_size > 0


def test_augment_size_mismatch_is_runtime_error(tmp_path):
    write_png(tmp_path / "x.png", np.zeros((16, 16)))
    write_png(tmp_path / "p.png", np.zeros((8, 8)))
    rc = main(["augment", str(tmp_path / "x.png"), str(tmp_path / "p.png"),
               str(tmp_path / "z.png")])
    assert rc == 2


def test_augment_missing_file_is_runtime_error(tmp_path):
    write_png(tmp_path / "x.png", np.zeros((8, 8)))
    rc = main(["augment", str(tmp_path / "x.png"), str(tmp_path / "nope.png"),
               str(tmp_path / "z.png")])
    assert rc == 2


def test_augment_bad_lambda_is_validation_error(tmp_path):
    write_png(tmp_path / "x.png", np.zeros((8, 8)))
    write_png(tmp_path / "p.png", np.zeros((8, 8)))
    rc = main(["augment", str(tmp_path / "x.png"), str(tmp_path / "p.png"),
               str(tmp_path / "z.png"), "--lam", "1.5"])
    assert rc == 1


# -- train / eval -----------------------------------------------------------


def test_train_writes_report_checkpoint_and_figure(tmp_path):
    out = tmp_path / "run"
    rc = main(["train", *TINY, "--epochs", "2", "--output-dir", str(out)])
    assert rc == 0
    rows = read_train_rows(out / "train_report.csv")
    assert [r.epoch for r in rows] == [0, 1]
    assert (out / "ckpt_final.ckpt").is_file()
    assert (out / "config.cfg").is_file()
    assert (out / "training_curves.png").is_file()
    ck = load_checkpoint(out / "ckpt_final.ckpt")
    assert ck.epoch == 2


def test_train_epochs_zero_leaves_initial_checkpoint_and_empty_report(tmp_path):
    out = tmp_path / "run0"
    rc = main(["train", *TINY, "--epochs", "0", "--output-dir", str(out),
               "--figures", "false"])
    assert rc == 0
    assert read_train_rows(out / "train_report.csv") == []
    ck = load_checkpoint(out / "ckpt_final.ckpt")
    assert ck.epoch == 0 and ck.step == 0


def test_flags_override_config_file(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    out = tmp_path / "run"
    assert main(["train", *TINY, "--epochs", "1", "--output-dir", str(out),
                 "--figures", "false"]) == 0
    text = (out / "config.cfg").read_text()
    cfg_file.write_text(text)
    out2 = tmp_path / "run2"
    assert main(["train", "--config", str(cfg_file), "--epochs", "2",
                 "--output-dir", str(out2), "--figures", "false"]) == 0
    assert len(read_train_rows(out2 / "train_report.csv")) == 2


def test_resume_matches_uninterrupted_run(tmp_path):
    full_out = tmp_path / "full"
    assert main(["train", *TINY, "--epochs", "4", "--output-dir", str(full_out),
                 "--figures", "false"]) == 0

    part_out = tmp_path / "part"
    assert main(["train", *TINY, "--epochs", "2", "--output-dir", str(part_out),
                 "--checkpoint-every", "2", "--figures", "false"]) == 0
    mid = part_out / "ckpt_epoch_0002.ckpt"
    assert mid.is_file()
    assert main(["train", "--resume", str(mid), "--epochs", "4",
                 "--figures", "false"]) == 0

    ck_full = load_checkpoint(full_out / "ckpt_final.ckpt")
    ck_part = load_checkpoint(part_out / "ckpt_final.ckpt")
    assert ck_full.epoch == ck_part.epoch == 4
    assert ck_full.step == ck_part.step
    for (na, aa), (nb, ab) in zip(ck_full.params, ck_part.params):
        assert na == nb and np.array_equal(aa, ab)
    assert read_train_rows(full_out / "train_report.csv") == \
        read_train_rows(part_out / "train_report.csv")


def test_eval_writes_metrics_summary_and_figure(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *TINY, "--epochs", "1", "--output-dir", str(out),
                 "--figures", "false"]) == 0
    rc = main(["eval", "--checkpoint", str(out / "ckpt_final.ckpt"),
               "--figures", "true"])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "overall dice" in printed
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "subject_id,class_id,dice,hausdorff"
    assert len(lines) == 1 + 4 * 2  # 4 held-out subjects, 2 foreground classes
    assert (out / "summary.txt").is_file()
    assert (out / "dice_bars.png").is_file()


def test_eval_missing_checkpoint_is_runtime_error(tmp_path):
    rc = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")])
    assert rc == 2


# -- validation and gradcheck ----------------------------------------------


def test_unknown_flag_is_validation_error(capsys):
    assert main(["train", "--momentum", "0.9"]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_flag_value_is_validation_error(capsys):
    assert main(["train", "--epochs", "soon"]) == 1


def test_bad_config_file_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = 3\nmomentum = 0.9\n")
    assert main(["train", "--config", str(bad)]) == 1
    assert "momentum" in capsys.readouterr().err


def test_gradcheck_command_passes_and_prints_table(capsys):
    assert main(["gradcheck"]) == 0
    table = capsys.readouterr().out
    assert "max_rel_err" in table and "full_loss" in table
    assert "FAIL" not in table
