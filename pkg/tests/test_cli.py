import json
import math
import subprocess
import sys

import numpy as np
import pytest

from surfelshade.cli import run
from surfelshade.io import load_checkpoint, read_plane
from surfelshade.scene import load_dataset
from surfelshade.training import init_model

MODEL_FLAGS = ["--grid-height", "8", "--grid-width", "16", "--grid-levels", "3",
               "--hidden", "8", "8"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    code = run(["gen-scene", "--kind", "textured_ball", "--views", "3", "--test-views", "2",
                "--width", "16", "--height", "16", "--splats", "60", "--out", str(out)]
               + MODEL_FLAGS)
    assert code == 0
    return out


def train_args(data_dir, out, *extra):
    return (["train", "--data", str(data_dir), "--out", str(out), "--quiet", "--init-count",
             "40"] + MODEL_FLAGS + list(extra))


def test_gen_scene_layout(data_dir):
    for name in ("transforms_train.json", "transforms_test.json", "scene.json",
                 "run_config.json"):
        assert (data_dir / name).exists()
    assert len(load_dataset(data_dir, "train")) == 3
    assert len(load_dataset(data_dir, "test")) == 2


def test_train_zero_iterations_equals_init(data_dir, tmp_path):
    assert run(train_args(data_dir, tmp_path, "--iterations", "0")) == 0
    model, cfg, _ = load_checkpoint(tmp_path / "model.ckpt")
    init = init_model(load_dataset(data_dir, "train"), cfg)
    for name, arr in init.splats.arrays().items():
        assert np.array_equal(getattr(model.splats, name), arr)
    assert np.array_equal(model.grid.base, init.grid.base)
    for k, v in init.mlp.params.items():
        assert np.array_equal(model.mlp.params[k], v)
    log = (tmp_path / "train_log.csv").read_text().splitlines()
    assert log == ["iter,total_loss,L_rgb,L_d,L_n,train_psnr,n_splats"]


def test_run_config_echoes_every_default(data_dir, tmp_path):
    assert run(train_args(data_dir, tmp_path, "--iterations", "0")) == 0
    rec = json.loads((tmp_path / "run_config.json").read_text())
    cfg = rec["config"]
    assert cfg["lambda_d"] == 100.0 and cfg["lambda_n"] == 0.05 and cfg["lambda_ssim"] == 0.2
    assert cfg["model"]["grid_height"] == 8 and cfg["render"]["tile_size"] == 16
    assert rec["argv"][0] == "train" and "threads" in rec


def test_run_config_reproduces_bit_exactly(data_dir, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run(train_args(data_dir, first, "--iterations", "6", "--seed", "5")) == 0
    assert run(["train", "--data", str(data_dir), "--out", str(second), "--quiet", "--config",
                str(first / "run_config.json")]) == 0
    assert (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()


def test_eval_identical_dirs_inf(data_dir, tmp_path, capsys):
    imgs = data_dir / "test"
    assert run(["eval", "--pred", str(imgs), "--gt", str(imgs), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "eval.csv").read_text().splitlines()
    assert rows[0] == "frame,psnr,ssim,mae"
    assert all(row.split(",")[1] == "inf" for row in rows[1:])
    summary = json.loads((tmp_path / "eval.json").read_text())
    assert summary["psnr"] == "inf" and summary["ssim"] == pytest.approx(1.0)


def test_render_then_eval_roundtrip(data_dir, tmp_path):
    train_out, render_out = tmp_path / "t", tmp_path / "r"
    assert run(train_args(data_dir, train_out, "--iterations", "3")) == 0
    ckpt = str(train_out / "model.ckpt")
    assert run(["render", "--checkpoint", ckpt, "--data", str(data_dir), "--split", "test",
                "--out", str(render_out), "--decompose", "--dump", "linear"]) == 0
    assert sorted(p.name for p in render_out.glob("*.png")) == ["r_003.png", "r_004.png"]
    for plane in ("diffuse", "specular", "normal", "roughness"):
        assert (render_out / "buffers" / f"r_003_{plane}.bin").exists()
    assert read_plane(render_out / "r_003_linear.bin").shape == (16, 16, 3)
    # rendered PNGs evaluated against a direct checkpoint evaluation agree
    eval_a, eval_b = tmp_path / "ea", tmp_path / "eb"
    assert run(["eval", "--pred", str(render_out), "--gt", str(data_dir / "test"),
                "--out", str(eval_a)]) == 0
    assert run(["eval", "--checkpoint", ckpt, "--data", str(data_dir), "--out",
                str(eval_b)]) == 0
    a = json.loads((eval_a / "eval.json").read_text())
    b = json.loads((eval_b / "eval.json").read_text())
    assert a["psnr"] == pytest.approx(b["psnr"], abs=1e-6)
    assert b["mae"] is not None and 0 <= b["mae"] <= 180


def test_render_orbit(data_dir, tmp_path):
    assert run(train_args(data_dir, tmp_path / "t", "--iterations", "0")) == 0
    out = tmp_path / "o"
    assert run(["render", "--checkpoint", str(tmp_path / "t" / "model.ckpt"), "--orbit", "3",
                "3.0", "20", "--width", "12", "--height", "10", "--out", str(out)]) == 0
    assert len(list(out.glob("orbit_*.png"))) == 3


def test_dump_buffers(data_dir, tmp_path):
    assert run(train_args(data_dir, tmp_path / "t", "--iterations", "0")) == 0
    out = tmp_path / "d"
    assert run(["dump-buffers", "--checkpoint", str(tmp_path / "t" / "model.ckpt"), "--data",
                str(data_dir), "--frame", "1", "--out", str(out)]) == 0
    for plane in ("diffuse", "feature", "roughness", "normal", "depth", "alpha", "specular"):
        assert (out / f"{plane}.png").exists()
    assert read_plane(out / "feature.bin").shape == (16, 16, 4)
    assert run(["dump-buffers", "--checkpoint", str(tmp_path / "t" / "model.ckpt"), "--data",
                str(data_dir), "--frame", "9", "--out", str(out)]) == 1


def test_exit_codes(tmp_path, capsys):
    assert run(["train", "--bogus-flag"]) == 2
    assert run(["nonsense"]) == 2
    assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err
    assert run(["eval", "--pred", str(tmp_path), "--out", str(tmp_path / "e")]) == 1
    assert run(["train", "--data", str(tmp_path), "--out", str(tmp_path), "--lambda-d",
                "-1"]) == 1


def test_help_documents_flags():
    out = subprocess.run([sys.executable, "-m", "surfelshade.cli", "train", "--help"],
                         capture_output=True, text=True, check=True).stdout
    for flag in ("--lambda-d", "--lambda-n", "--iterations", "--tile-size", "--alpha-skip",
                 "--seed", "--precision", "--lr-grid", "--geometry-from"):
        assert flag in out
    top = subprocess.run([sys.executable, "-m", "surfelshade.cli", "--help"],
                         capture_output=True, text=True, check=True).stdout
    assert "--threads" in top and "gen-scene" in top
