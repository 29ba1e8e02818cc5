import re
import subprocess
import sys

import numpy as np
import pytest

from mskd import cli
from mskd.data import write_tensor
from mskd.errors import TrainingError

TINY_CFG = """\
data.num_organs=2
data.num_train=6
data.num_test=3
data.image_size=32
data.axis_range=3.0,6.0
model.depth=2
model.base_width=4
train.iters_per_epoch=2
train.max_epochs=1
train.initial_lr=0.001
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG, encoding="utf-8")
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    for k in (1, 2):
        assert cli.main(["train-teacher", "--organ", str(k), "--data", str(root / "data"),
                         "--config", str(cfg), "--out", str(root / f"t{k}")]) == 0
    return root, cfg


def _teachers(root):
    return [str(root / "t2" / "model.mskd"), str(root / "t1" / "model.mskd")]


def test_run_directory_contents(workspace):
    root, _ = workspace
    names = {p.name for p in (root / "t1").iterdir()}
    assert {"config.txt", "seeds.txt", "run.txt", "losses.txt", "loss_curve.png",
            "model.mskd"} <= names
    assert "feature_tap=" in (root / "t1" / "run.txt").read_text()
    assert (root / "data" / "organ_2" / "manifest.txt").is_file()


def test_distill_eval_report(workspace, capsys):
    root, cfg = workspace
    data = str(root / "data")
    assert cli.main(["distill", "--teachers", *_teachers(root), "--data", data,
                     "--config", str(cfg), "--out", str(root / "s")]) == 0
    assert cli.main(["distill", "--teachers", *_teachers(root), "--data", data,
                     "--config", str(cfg), "--out", str(root / "lw"), "--no-feature-loss"]) == 0
    assert cli.main(["eval", "--model", str(root / "s" / "model.mskd"), "--data", data,
                     "--out", str(root / "ev_s")]) == 0
    assert cli.main(["eval", "--model", str(root / "lw" / "model.mskd"), "--data", data,
                     "--out", str(root / "ev_lw")]) == 0
    assert cli.main(["eval", "--merge-teachers", *_teachers(root), "--data", data,
                     "--out", str(root / "ev_ind")]) == 0
    capsys.readouterr()
    out = root / "table.txt"
    assert cli.main(["report", "--runs", str(root / "ev_ind"), str(root / "ev_lw"),
                     str(root / "ev_s"), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    methods = [re.split(r"\s{2,}", line)[0] for line in printed.splitlines()[2:]]
    assert methods == ["Individual", "LW", "MS-KD (LW+FW)"]
    assert out.with_suffix(".csv").read_text().startswith(
        "method,organ,dsc_percent,hd,n_images,n_hd_excluded\n")
    assert out.with_suffix(".png").stat().st_size > 0


def test_outputs_idempotent(workspace):
    root, cfg = workspace
    args = ["distill-hard", "--teachers", *_teachers(root), "--data", str(root / "data"),
            "--config", str(cfg)]
    assert cli.main(args + ["--out", str(root / "h1")]) == 0
    assert cli.main(args + ["--out", str(root / "h2")]) == 0
    for name in ("model.mskd", "losses.txt", "loss_curve.png", "config.txt"):
        assert (root / "h1" / name).read_bytes() == (root / "h2" / name).read_bytes()


def test_uncertainty(workspace):
    root, _ = workspace
    image = root / "img.mskt"
    write_tensor(image, np.linspace(-400, 400, 32 * 32, dtype=np.float32).reshape(32, 32))
    out = root / "u.png"
    assert cli.main(["uncertainty", "--teacher", str(root / "t1" / "model.mskd"),
                     "--image", str(image), "--out", str(out)]) == 0
    from PIL import Image
    with Image.open(out) as im:
        assert im.mode == "L" and im.size == (32, 32)
    assert (root / "u_figure.png").is_file()


def _err(capsys):
    return capsys.readouterr().err.strip()


def test_exit_codes(workspace, capsys, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    assert cli.main(["train-teacher", "--organ", "1"]) == 2
    assert _err(capsys).startswith("MSKD-ERR:usage:")

    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("train.batch_size=zero\n")
    assert cli.main(["gen-data", "--config", str(bad_cfg), "--out", str(tmp_path / "d")]) == 2
    assert _err(capsys).startswith("MSKD-ERR:config:")

    assert cli.main(["eval", "--model", str(tmp_path / "none.mskd"), "--data", data,
                     "--out", str(tmp_path / "e")]) == 3
    assert _err(capsys).startswith("MSKD-ERR:data:")

    broken = tmp_path / "broken.mskd"
    broken.write_bytes((root / "t1" / "model.mskd").read_bytes()[:200])
    assert cli.main(["eval", "--model", str(broken), "--data", data,
                     "--out", str(tmp_path / "e")]) == 5
    assert "offset" in _err(capsys)


def test_student_passed_as_teacher_is_config_error(workspace, capsys, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    assert cli.main(["distill-hard", "--teachers", *_teachers(root), "--data", data,
                     "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["distill", "--teachers", str(tmp_path / "s" / "model.mskd"),
                     "--data", data, "--out", str(tmp_path / "x")]) == 2
    err = _err(capsys)
    assert err.startswith("MSKD-ERR:config-mismatch:") and "3" in err and "2" in err


def test_training_failure_exit_code(workspace, capsys, monkeypatch, tmp_path):
    root, cfg = workspace

    def boom(*args, **kwargs):
        raise TrainingError("non-finite loss at epoch 1, iteration 1")

    monkeypatch.setattr(cli, "train_teacher", boom)
    assert cli.main(["train-teacher", "--organ", "1", "--data", str(root / "data"),
                     "--config", str(cfg), "--out", str(tmp_path / "t")]) == 4
    assert _err(capsys).startswith("MSKD-ERR:training:")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mskd", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "benchmark" in proc.stdout
