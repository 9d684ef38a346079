import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from slicebrain.cli import main
from slicebrain.data import DatasetManifest, load_mask


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One small synth -> train run shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--train", "3", "--normal", "1", "--challenging", "2", "--shape", "32,32,8", "--seed", "4", "--out", str(root / "data")]) == 0
    assert main([
        "train", "--network", "unet", "--manifest", str(root / "data" / "manifest.json"),
        "--epochs", "2", "--batch-size", "4", "--depth", "1", "--base-features", "4",
        "--validation-fraction", "0.34", "--seed", "1", "--out", str(root / "unet"),
    ]) == 0
    return root


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["synth", "--train", "1"]) == 2
    assert "--out" in capsys.readouterr().err
    assert main(["train", "--network", "resnet", "--out", str(tmp_path)]) == 2
    assert main(["bogus"]) == 2
    assert main(["evaluate", "--manifest", "m.json", "--out", str(tmp_path)]) == 2
    assert main(["train", "--network", "voxelwise", "--depth", "2", "--manifest", "m.json", "--out", str(tmp_path)]) == 2


def test_runtime_errors_exit_1(tmp_path, workdir, capsys):
    manifest = str(workdir / "data" / "manifest.json")
    assert main(["predict", "--checkpoint", str(tmp_path / "missing.ckpt"), "--manifest", manifest, "--out", str(tmp_path / "p")]) == 1
    assert "missing.ckpt" in capsys.readouterr().err
    assert main(["evaluate", "--checkpoint", str(workdir / "unet" / "final.ckpt"), "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "e")]) == 1


def test_synth_manifest_reproducible(tmp_path):
    args = ["synth", "--train", "20", "--normal", "4", "--challenging", "4", "--shape", "32,32,8", "--seed", "9"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    m = DatasetManifest.load(tmp_path / "a" / "manifest.json")
    assert len(m.entries) == 28
    assert _sha(tmp_path / "a" / "manifest.json") == _sha(tmp_path / "b" / "manifest.json")
    echo = json.loads((tmp_path / "a" / "config_echo.json").read_text())
    assert echo["command"] == "synth" and echo["options"]["seed"] == 9


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("SLICEBRAIN_SEED", "17")
    assert main(["synth", "--train", "1", "--shape", "16,16,4", "--out", str(tmp_path / "env")]) == 0
    assert json.loads((tmp_path / "env" / "config_echo.json").read_text())["options"]["seed"] == 17
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": 1, "shape": [16, 16, 4], "seed": 5}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "file")]) == 0
    assert json.loads((tmp_path / "file" / "config_echo.json").read_text())["options"]["seed"] == 5
    assert main(["synth", "--config", str(cfg), "--seed", "6", "--out", str(tmp_path / "flag")]) == 0
    assert json.loads((tmp_path / "flag" / "config_echo.json").read_text())["options"]["seed"] == 6


def test_train_outputs_and_echo(workdir):
    out = workdir / "unet"
    for name in ["final.ckpt", "best.ckpt", "history.csv", "loss_curve.png", "config_echo.json"]:
        assert (out / name).exists(), name
    echo = json.loads((out / "config_echo.json").read_text())
    assert echo["lr_schedule"] == "1e-4 × 0.9^⌊step/2000⌋"
    assert echo["train_config"]["model"] == {"depth": 1, "base_features": 4}


def test_train_rerun_from_echo_is_bit_identical(workdir, tmp_path):
    assert main(["train", "--config", str(workdir / "unet" / "config_echo.json"), "--out", str(tmp_path / "again")]) == 0
    for name in ["final.ckpt", "best.ckpt", "history.csv"]:
        assert _sha(workdir / "unet" / name) == _sha(tmp_path / "again" / name), name


def test_predict_writes_masks(workdir, tmp_path):
    manifest = str(workdir / "data" / "manifest.json")
    ckpt = str(workdir / "unet" / "final.ckpt")
    assert main(["predict", "--checkpoint", ckpt, "--manifest", manifest, "--split", "challenging_test", "--out", str(tmp_path / "a")]) == 0
    assert main(["predict", "--checkpoint", ckpt, "--manifest", manifest, "--split", "challenging_test", "--postprocess", "--out", str(tmp_path / "pp")]) == 0
    masks = sorted((tmp_path / "a" / "masks").iterdir())
    assert len(masks) == 2
    for p in masks:
        plain = load_mask(p).labels
        post = load_mask(tmp_path / "pp" / "masks" / p.name).labels
        assert plain.shape == (32, 32, 8)
        # closing only adds and CC only removes, so differences stay where those act
        assert post.shape == plain.shape
    assert main(["predict", "--config", str(tmp_path / "a" / "config_echo.json"), "--out", str(tmp_path / "b")]) == 0
    for p in masks:
        assert _sha(p) == _sha(tmp_path / "b" / "masks" / p.name)
    rows = list(csv.reader(open(tmp_path / "a" / "timing.csv")))
    assert rows[0] == ["stack_id", "slice_index", "seconds"] and len(rows) == 1 + 2 * 8


def test_evaluate_tables_and_plot(workdir, tmp_path):
    manifest = str(workdir / "data" / "manifest.json")
    ckpt = str(workdir / "unet" / "final.ckpt")
    args = ["evaluate", "--compare", ckpt, ckpt, "--labels", "U-Net", "U-Net-PP", "--manifest", manifest]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    out = tmp_path / "a"
    for name in ["table_normal_test.csv", "table_challenging_test.txt", "boxplot.png", "00_U-Net/report.csv", "01_U-Net-PP/boxplot.csv"]:
        assert (out / name).exists(), name
    rows = list(csv.DictReader(open(out / "table_challenging_test.csv")))
    assert [r["method"] for r in rows] == ["U-Net", "U-Net-PP"]
    assert main(args + ["--no-plot", "--out", str(tmp_path / "b")]) == 0
    assert not (tmp_path / "b" / "boxplot.png").exists()
    for name in ["00_U-Net/report.csv", "00_U-Net/report.json", "table_normal_test.csv"]:
        assert _sha(out / name) == _sha(tmp_path / "b" / name), name


def test_stream_stack_replay(workdir, tmp_path, capsys):
    manifest = DatasetManifest.load(workdir / "data" / "manifest.json")
    entry = manifest.split("normal_test")[0]
    ckpt = str(workdir / "unet" / "final.ckpt")
    assert main(["stream", "--checkpoint", ckpt, "--input-stack", str(manifest.resolve(entry.stack)), "--out", str(tmp_path)]) == 0
    assert "REALTIME: yes" in capsys.readouterr().err
    summary = json.loads((tmp_path / "stream_summary.json").read_text())
    assert summary["frames"] == 8 and summary["realtime"]
    assert main(["predict", "--checkpoint", ckpt, "--manifest", str(workdir / "data" / "manifest.json"), "--out", str(tmp_path / "batch")]) == 0
    batch = load_mask(tmp_path / "batch" / "masks" / f"{entry.stack.split('.')[0]}_pred.nii").labels
    assert np.array_equal(load_mask(tmp_path / "stream_masks.nii").labels, batch)


def test_stream_stdin_subprocess(workdir, tmp_path):
    from slicebrain.streaming import encode_frame, read_frames

    manifest = DatasetManifest.load(workdir / "data" / "manifest.json")
    stack, _ = manifest.load_pair(manifest.split("normal_test")[0])
    payload = b"".join(encode_frame(stack.slice(k), k) for k in range(stack.n_slices))
    proc = subprocess.run(
        [sys.executable, "-m", "slicebrain", "stream", "--checkpoint", str(workdir / "unet" / "final.ckpt"), "--emit", "-"],
        input=payload, capture_output=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr.decode()
    import io

    frames = list(read_frames(io.BytesIO(proc.stdout)))
    assert [h["slice_index"] for h, _ in frames] == list(range(8))
    assert b"REALTIME" in proc.stderr
