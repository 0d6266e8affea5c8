import os
import subprocess
import sys

import pytest
import torch

from edpn.cli import main
from edpn.imageio import read_image, write_image
from edpn.synthetic import natural_image

TINY = ["--set", "model.channels=8", "--set", "model.extractor_blocks=1", "--set", "model.recon_blocks=1",
        "--set", "model.N=1", "--set", "model.K=1"]


@pytest.fixture()
def sharp_dir(tmp_path):
    d = tmp_path / "sharp"
    for i in range(2):
        write_image(d / f"img{i}.ppm", natural_image(32, 32, seed=i))
    return d


def run(*args):
    return main([str(a) for a in args])


def test_usage_errors_exit_1(capsys, tmp_path):
    assert run("frobnicate") == 1
    assert run("eval", "--bogus") == 1
    assert run("eval", "--set", "model.nope=1") == 1
    err = capsys.readouterr().err
    assert "model.nope" in err and all(line.startswith("edpn:") for line in err.strip().splitlines())
    assert run("eval", "--config", tmp_path / "missing.cfg") == 1
    assert run("eval") == 1  # paths.corpus required


def test_runtime_failure_exit_2(capsys, tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("degrade", "--corpus", tmp_path / "empty", "--out", tmp_path / "o") == 2
    assert run("infer", "--input", tmp_path / "x.ppm", "--checkpoint", tmp_path / "nope.edpn", "--out", tmp_path) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 2 and "failed" in err[0]


def test_degrade_deterministic(tmp_path, sharp_dir):
    for out in ("a", "b"):
        assert run("degrade", "--corpus", sharp_dir, "--out", tmp_path / out, "--seed", 3, "--format", "edpnt") == 0
    for sub in ("input", "gt"):
        names = sorted(os.listdir(tmp_path / "a" / sub))
        assert names == ["img0.edpnt", "img1.edpnt"]
        for n in names:
            assert (tmp_path / "a" / sub / n).read_bytes() == (tmp_path / "b" / sub / n).read_bytes()
    assert read_image(tmp_path / "a" / "input" / "img0.edpnt").shape == (3, 8, 8)
    assert run("degrade", "--corpus", sharp_dir, "--out", tmp_path / "c", "--seed", 4, "--format", "edpnt") == 0
    assert (tmp_path / "a/input/img0.edpnt").read_bytes() != (tmp_path / "c/input/img0.edpnt").read_bytes()


def test_eval_on_gt_pairs_hits_cap(tmp_path, sharp_dir, capsys):
    for sub in ("input", "gt"):
        for f in sharp_dir.iterdir():
            write_image(tmp_path / "corpus" / sub / f.name, read_image(f))
    assert run("eval", "--corpus", tmp_path / "corpus", "--set", "task=BID", "--out", tmp_path / "ev") == 0
    rows = (tmp_path / "ev" / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "name,psnr_rgb,ssim_rgb,psnr_y,ssim_y"
    assert [r.split(",")[0] for r in rows[1:]] == ["img0", "img1", "mean"]
    for r in rows[1:]:
        _, p, s, py, sy = r.split(",")
        assert float(p) == 100.0 and float(py) == 100.0 and float(s) == 1.0 and float(sy) == 1.0
    assert "psnr_rgb=100.000000" in capsys.readouterr().out


def test_train_infer_eval_roundtrip(tmp_path, sharp_dir, capsys):
    assert run("degrade", "--corpus", sharp_dir, "--out", tmp_path / "deg", "--set", "task=BID",
               "--set", "degrade.quality=50") == 0
    # max_iters=0 gives the zero-residual initialisation: infer is the identity
    assert run("train", "--corpus", tmp_path / "deg", "--out", tmp_path / "run0", "--set", "task=BID",
               "--set", "train.max_iters=0", "--set", "train.patch=16", *TINY) == 0
    ckpt = tmp_path / "run0" / "last.edpn"
    assert ckpt.exists() and (tmp_path / "run0" / "loss_trace.csv").exists()
    assert run("infer", "--input", tmp_path / "deg" / "input", "--checkpoint", ckpt, "--out", tmp_path / "pred",
               "--set", "task=BID", *TINY) == 0
    for name in ("img0.ppm", "img1.ppm"):
        assert (tmp_path / "pred" / name).read_bytes() == (tmp_path / "deg" / "input" / name).read_bytes()
    # a couple of real iterations, then eval through the self-ensemble path
    assert run("train", "--corpus", sharp_dir, "--out", tmp_path / "run1", "--set", "task=BID",
               "--set", "train.max_iters=2", "--set", "train.patch=16", "--set", "train.batch=1", *TINY) == 0
    trace = (tmp_path / "run1" / "loss_trace.csv").read_text().splitlines()
    assert len(trace) == 3
    assert run("eval", "--corpus", tmp_path / "deg", "--checkpoint", tmp_path / "run1" / "last.edpn",
               "--self-ensemble", "--set", "task=BID", *TINY) == 0
    out = capsys.readouterr().out
    assert "mean," in out and "ssim_y=" in out
    # model ensemble of the two checkpoints via flags
    assert run("infer", "--input", tmp_path / "deg" / "input" / "img0.ppm", "--model", ckpt,
               "--model", tmp_path / "run1" / "last.edpn", "--weights", "0.5,0.5", "--out", tmp_path / "ens",
               "--set", "task=BID", *TINY) == 0
    assert read_image(tmp_path / "ens" / "img0.ppm").shape == (3, 32, 32)


def test_train_rejects_mismatched_resume(tmp_path, sharp_dir):
    assert run("train", "--corpus", sharp_dir, "--out", tmp_path / "r", "--set", "train.max_iters=0",
               "--set", "train.patch=8", *TINY) == 0
    assert run("train", "--corpus", sharp_dir, "--out", tmp_path / "r2", "--checkpoint", tmp_path / "r" / "last.edpn",
               "--set", "train.patch=8") == 1


def test_bisr_eval_without_model_uses_bilinear(tmp_path, sharp_dir, capsys):
    assert run("degrade", "--corpus", sharp_dir, "--out", tmp_path / "deg") == 0
    assert run("eval", "--corpus", tmp_path / "deg") == 0
    assert "mean," in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "edpn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "degrade" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "edpn.cli", "eval", "--set", "x=1"], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("edpn: config error")
