import csv

import numpy as np
import pytest

from fmamba.cli import main
from fmamba.io import read_image, write_image
from fmamba.network import ModelConfig, load_state


def pair(n=32, phase=0.0):
    yy, xx = np.mgrid[0:n, 0:n] / n
    return 0.5 + 0.4 * np.sin(2 * np.pi * (2 * xx + phase)) * np.cos(2 * np.pi * yy), 0.2 + 0.6 * yy


@pytest.fixture
def images(tmp_path):
    I1, I2 = pair()
    write_image(I1, tmp_path / "a.pgm")
    write_image(I2, tmp_path / "b.pgm")
    return tmp_path


def fuse(d, out, *extra):
    return main(["fuse", "--a", str(d / "a.pgm"), "--b", str(d / "b.pgm"), "--out", str(d / out), *extra])


def test_fuse_is_deterministic_and_reports(images, capsys):
    assert fuse(images, "f1.pgm", "--seed", "7", "--preset", "micro") == 0
    assert fuse(images, "f2.pgm", "--seed", "7", "--preset", "micro", "--report", str(images / "r.csv")) == 0
    assert (images / "f1.pgm").read_bytes() == (images / "f2.pgm").read_bytes()
    rows = list(csv.reader(open(images / "r.csv")))
    assert rows[0] == ["pair", "vif", "scd", "qabf", "msssim", "fmi"] and rows[1][0] == "f2"
    assert "wrote" in capsys.readouterr().out


def test_fuse_input_errors(images, capsys):
    assert fuse(images, "f.pgm", "--preset", "micro") == 2
    small = images / "s.pgm"
    write_image(np.zeros((32, 64)), small)
    assert main(["fuse", "--a", str(images / "a.pgm"), "--b", str(small), "--out", str(images / "f.pgm"),
                 "--seed", "1", "--preset", "micro"]) == 2
    assert main(["fuse", "--a", str(images / "missing.pgm"), "--b", str(small), "--out", "x.pgm",
                 "--seed", "1"]) == 2
    assert "error:" in capsys.readouterr().err


def test_state_errors_exit_3(images):
    (images / "junk.fm").write_bytes(b"nope")
    assert fuse(images, "f.pgm", "--state", str(images / "junk.fm")) == 3


def test_train_then_fuse_from_state(images, capsys):
    st = images / "m.fm"
    assert main(["train-toy", "--a", str(images / "a.pgm"), "--b", str(images / "b.pgm"), "--steps", "2",
                 "--preset", "micro", "--out", str(st)]) == 0
    assert "ratio" in capsys.readouterr().out
    assert load_state(st).config == ModelConfig.micro()
    assert fuse(images, "f.pgm", "--state", str(st)) == 0
    assert read_image(images / "f.pgm").shape == (32, 32)
    assert fuse(images, "g.pgm", "--state", str(st), "--preset", "toy") == 3


def test_train_rejects_zero_steps(images):
    assert main(["train-toy", "--a", str(images / "a.pgm"), "--b", str(images / "b.pgm"), "--steps", "0",
                 "--preset", "micro", "--out", str(images / "m.fm")]) == 2


def test_config_file_with_flag_override(images):
    cfg = images / "run.cfg"
    cfg.write_text(f"# toy run\npreset = micro\nsteps = 5\na = {images / 'a.pgm'}\nb = {images / 'b.pgm'}\n"
                   f"out = {images / 'cfg.fm'}\n")
    assert main(["--config", str(cfg), "train-toy", "--steps", "1"]) == 0
    assert load_state(images / "cfg.fm").config == ModelConfig.micro()
    cfg.write_text("colour = blue\n")
    assert main(["--config", str(cfg), "check", "--suite", "zoh"]) == 3


def test_metrics_directories(tmp_path, capsys):
    for sub in ("A", "B", "F"):
        (tmp_path / sub).mkdir()
    for k in range(3):
        I1, I2 = pair(64, 0.1 * k)
        write_image(I1, tmp_path / "A" / f"p{k}.pgm")
        write_image(I2, tmp_path / "B" / f"p{k}.pgm")
        write_image(0.5 * (I1 + I2), tmp_path / "F" / f"p{k}.pgm")
    write_image(np.zeros((64, 64)), tmp_path / "A" / "extra.pgm")
    args = ["metrics", "--dir-a", str(tmp_path / "A"), "--dir-b", str(tmp_path / "B"), "--dir-f",
            str(tmp_path / "F"), "--out", str(tmp_path / "m.csv"), "--jsonl", str(tmp_path / "m.jsonl")]
    assert main(args) == 0
    assert "unmatched stem 'extra'" in capsys.readouterr().err
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert [r[0] for r in rows[1:]] == ["p0", "p1", "p2", "mean"]
    assert len(open(tmp_path / "m.jsonl").readlines()) == 4

    (tmp_path / "E").mkdir()
    args[6] = str(tmp_path / "E")
    assert main(args) == 2


def test_check_suites(capsys, monkeypatch):
    assert main(["check", "--suite", "ssm"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["check", "--suite", "zoh", "--inject-fault", "zoh"]) == 1
    assert "FAIL" in capsys.readouterr().out
    monkeypatch.setenv("FMAMBA_THREADS", "zero")
    assert main(["check", "--suite", "zoh"]) == 2
    monkeypatch.setenv("FMAMBA_THREADS", "1")
    assert main(["check", "--suite", "zoh"]) == 0


def test_usage_errors_exit_2(capsys):
    assert main(["fuse", "--seed", "-3"]) == 2
    assert "64-bit" in capsys.readouterr().err
    assert main([]) == 2
