"""End-to-end CLI runs on miniature configurations."""

import os

import numpy as np
import pytest

from protoad.checkpoint import load_checkpoint
from protoad.cli import main
from protoad.imagefiles import read_pgm

TINY_DATA = ["--size", "16", "--radius", "3,6"]
TINY_TRAIN = [
    "--synth", *TINY_DATA, "--train", "8", "--test", "3,3",
    "--patch", "8", "--dim", "8", "--depth", "2", "--heads", "2",
    "--extract", "1,2", "--decoder-depth", "2", "--protos", "3",
    "--iters", "4", "--batch", "4", "--warmup", "2", "--log-interval", "2",
]


def run(argv):
    return main([str(a) for a in argv])


def test_gen_writes_expected_files(tmp_path):
    out = tmp_path / "data"
    code = run(["gen", "--seed", "7", "--train", "5", "--test", "2,2", *TINY_DATA,
                "--out", out])
    assert code == 0
    files = sorted(os.listdir(out))
    assert "manifest.txt" in files
    pgms = [f for f in files if f.endswith(".pgm")]
    assert len(pgms) == 5 + 4 + 2  # images + anomalous masks


def test_gen_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert run(["gen", "--seed", "3", "--train", "4", "--test", "2,2",
                    *TINY_DATA, "--out", out]) == 0
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_rejects_zero_train(tmp_path):
    code = run(["gen", "--seed", "1", "--train", "0", "--out", tmp_path / "d"])
    assert code == 2


def test_train_writes_checkpoint_and_log(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    csv = tmp_path / "log.csv"
    code = run(["train", *TINY_TRAIN, "--seed", "5", "--mode", "m2plus",
                "--proto-loss", "daa", "--checkpoint", ckpt, "--log-csv", csv])
    assert code == 0
    assert ckpt.exists()
    lines = csv.read_text().strip().splitlines()
    assert lines[0] == "step,recon,proto,total,entropy,max_share"
    assert len(lines) == 1 + 2  # steps 2 and 4
    state, header = load_checkpoint(str(ckpt))
    assert header["mode"] == "m2plus"
    assert header["beta"] == "0.9999"
    assert header["lambda"] == "0.2"
    assert header["m"] == "6" or header["m"] == "3"


def test_train_defaults_match_documented_values(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    code = run(["train", *TINY_TRAIN, "--seed", "1", "--checkpoint", ckpt,
                "--log-csv", tmp_path / "l.csv"])
    assert code == 0
    _, header = load_checkpoint(str(ckpt))
    # defaults when flags are omitted
    assert header["beta"] == "0.9999"
    assert header["lambda"] == "0.2"
    assert header["proto_kind"] == "daa"
    assert header["mode"] == "m2plus"


def test_train_requires_a_dataset(tmp_path):
    code = run(["train", "--iters", "1", "--checkpoint", tmp_path / "m.ckpt",
                "--log-csv", tmp_path / "l.csv"])
    assert code == 2


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.conf"
    cfg.write_text("iters = 2\nmode = m1\nseed = 9\n")
    ckpt = tmp_path / "m.ckpt"
    # --iters on the command line beats the file; mode comes from the file
    code = run(["train", *TINY_TRAIN, "--config", cfg, "--iters", "3",
                "--checkpoint", ckpt, "--log-csv", tmp_path / "l.csv"])
    assert code == 0
    _, header = load_checkpoint(str(ckpt))
    assert header["mode"] == "m1"
    assert header["step"] == "3"
    assert header["seed"] == "9"


def test_eval_reports_metrics(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert run(["train", *TINY_TRAIN, "--seed", "2", "--checkpoint", ckpt,
                "--log-csv", tmp_path / "l.csv"]) == 0
    out_csv = tmp_path / "report.csv"
    code = run(["eval", "--checkpoint", ckpt, "--synth", *TINY_DATA,
                "--train", "8", "--test", "3,3", "--seed", "2", "--out", out_csv])
    assert code == 0
    lines = out_csv.read_text().strip().splitlines()
    assert lines[0] == "auc,f1,acc,sen,spe,threshold"
    values = lines[1].split(",")
    assert len(values) == 6
    assert 0.0 <= float(values[0]) <= 1.0


def test_eval_single_class_split_is_metric_error(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert run(["train", *TINY_TRAIN, "--seed", "2", "--checkpoint", ckpt,
                "--log-csv", tmp_path / "l.csv"]) == 0
    code = run(["eval", "--checkpoint", ckpt, "--synth", *TINY_DATA,
                "--train", "8", "--test", "3,0", "--seed", "2"])
    assert code == 5


def test_eval_is_deterministic(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert run(["train", *TINY_TRAIN, "--seed", "4", "--checkpoint", ckpt,
                "--log-csv", tmp_path / "l.csv"]) == 0
    outs = []
    for name in ("r1.csv", "r2.csv"):
        path = tmp_path / name
        assert run(["eval", "--checkpoint", ckpt, "--synth", *TINY_DATA,
                    "--train", "8", "--test", "3,3", "--seed", "4", "--out", path]) == 0
        outs.append(path.read_text())
    assert outs[0] == outs[1]


def test_infer_writes_maps_and_header(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    data = tmp_path / "data"
    assert run(["gen", "--seed", "6", "--train", "4", "--test", "1,1", *TINY_DATA,
                "--out", data]) == 0
    assert run(["train", *TINY_TRAIN, "--seed", "6", "--checkpoint", ckpt,
                "--log-csv", tmp_path / "l.csv"]) == 0
    img = data / "train-00000.pgm"
    outdir = tmp_path / "maps"
    code = run(["infer", "--checkpoint", ckpt, "--out-dir", outdir, img])
    assert code == 0
    raw = outdir / "train-00000-raw.pgm"
    heat = outdir / "train-00000-heat.ppm"
    assert raw.exists() and heat.exists()
    assert heat.read_bytes().startswith(b"P6\n16 16\n255\n")
    assert read_pgm(str(raw)).shape == (16, 16)


def test_infer_continues_after_bad_file(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    data = tmp_path / "data"
    assert run(["gen", "--seed", "6", "--train", "4", "--test", "1,1", *TINY_DATA,
                "--out", data]) == 0
    assert run(["train", *TINY_TRAIN, "--seed", "6", "--checkpoint", ckpt,
                "--log-csv", tmp_path / "l.csv"]) == 0
    good = data / "train-00001.pgm"
    missing = data / "no-such-file.pgm"
    outdir = tmp_path / "maps"
    code = run(["infer", "--checkpoint", ckpt, "--out-dir", outdir, missing, good])
    assert code == 3  # at least one failure
    assert (outdir / "train-00001-raw.pgm").exists()  # batch continued


def test_collapse_writes_comparison_csv(tmp_path):
    out = tmp_path / "collapse.csv"
    code = run(["collapse", *TINY_TRAIN, "--seeds", "1,2", "--out", out])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("seed,loss,entropy,count_0")
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 4  # two seeds x two loss kinds
    kinds = {(r[0], r[1]) for r in rows}
    assert ("1", "daa") in kinds and ("1", "coherence") in kinds
    # histogram counts sum to tokens-per-image x train images
    n_tokens = (16 // 8) ** 2 * 8
    for r in rows:
        assert sum(int(c) for c in r[3:]) == n_tokens


def test_corrupt_checkpoint_is_io_error(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    code = run(["eval", "--checkpoint", path, "--synth", *TINY_DATA,
                "--train", "4", "--test", "2,2", "--seed", "1"])
    assert code == 3
