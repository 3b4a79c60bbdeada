import math
import os

import numpy as np
import pytest

from surfelshade.config import ModelConfig, TrainConfig
from surfelshade.io import load_checkpoint, save_checkpoint
from surfelshade.oracle import make_scene
from surfelshade.pipeline import frame_loss
from surfelshade.scene import Dataset, Splats, logit
from surfelshade.training import (LOG_HEADER, AdamState, NonFiniteLossError, adam_step,
                                  densify_and_prune, init_model, position_lr, reset_opacity,
                                  train)

SMALL = ModelConfig(grid_height=8, grid_width=16, grid_levels=3, hidden=(16, 16))


@pytest.fixture(scope="module")
def scene():
    return make_scene("random", seed=1, n_views=3, width=24, height=24, model_config=SMALL,
                      n_splats=30)


def quick_config(**kw):
    base = dict(model=SMALL, iterations=20, init_count=60, init_box=(-0.7,) * 3 + (0.7,) * 3,
                densify_from=5, densify_until=15, densify_interval=5, log_interval=5)
    base.update(kw)
    return TrainConfig(**base)


# adam


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3, -1e-6])
def test_adam_first_step_sign(g):
    p = np.array([1.0])
    m, v = np.zeros(1), np.zeros(1)
    adam_step(p, np.array([g]), m, v, step=1, lr=0.01)
    assert p[0] - 1.0 == pytest.approx(-0.01 * g / (abs(g) + 1e-8), abs=1e-15)
    if abs(g) >= 1e-2:  # eps / |g| below 1e-6
        assert p[0] - 1.0 == pytest.approx(-0.01 * math.copysign(1, g), abs=1e-6 * 0.01)


def test_adam_zero_grad_unchanged():
    p = np.array([0.3, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    for step in range(1, 50):
        adam_step(p, np.zeros(2), m, v, step=step, lr=0.1)
    assert np.array_equal(p, [0.3, -2.0])


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3), step=1, lr=0.1)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((20, 5))
    out = []
    for _ in range(2):
        p, m, v = np.ones(5), np.zeros(5), np.zeros(5)
        for i, g in enumerate(grads):
            adam_step(p, g, m, v, step=i + 1, lr=0.05)
        out.append(p)
    assert np.array_equal(out[0], out[1])


def test_optimizer_state_mirrors_parameters(scene):
    model = init_model(scene.dataset(), quick_config())
    state = AdamState.for_model(model)
    assert state.moments["splats/center"][0].shape == model.splats.center.shape
    assert state.moments["grid/base"][1].shape == model.grid.base.shape
    for name, arr in model.mlp.params.items():
        assert state.moments[f"mlp/{name}"][0].shape == arr.shape


def test_position_lr_decay():
    cfg = TrainConfig(iterations=101)
    assert position_lr(cfg, 0) == pytest.approx(cfg.lr_position)
    assert position_lr(cfg, 100) == pytest.approx(cfg.lr_position_final)
    assert position_lr(cfg, 50) == pytest.approx(math.sqrt(cfg.lr_position * cfg.lr_position_final))


# densification


def half_splats(n=10):
    s = Splats.zeros(n)
    s.center[:] = np.random.default_rng(0).uniform(-1, 1, (n, 3))
    s.opacity_raw[:] = 0.0
    s.log_scale[:] = math.log(0.1)
    return s


def test_densify_no_trigger():
    s = half_splats()
    out, origin = densify_and_prune(s, np.zeros(10), TrainConfig())
    assert np.array_equal(origin, np.arange(10))
    for name, arr in s.arrays().items():
        assert np.array_equal(getattr(out, name), arr)


def test_densify_prunes_transparent():
    s = half_splats()
    s.opacity_raw[3] = logit(0.001)
    out, origin = densify_and_prune(s, np.zeros(10), TrainConfig())
    assert len(out) == 9 and 3 not in origin


def test_densify_split_bookkeeping():
    s = half_splats()
    grads = np.zeros(10)
    grads[[1, 4, 7]] = 1.0
    cfg = TrainConfig(percent_dense=0.01)  # every splat counts as big: all three split
    out, origin = densify_and_prune(s, grads, cfg, scene_extent=2.0)
    assert len(out) == 10 + 3
    assert np.sum(origin == -1) == 6
    children = out.select(origin == -1)
    assert np.allclose(children.scale, 0.1 / 1.6)
    # children sit one scale unit either side of the parent along t_u
    assert np.allclose(children.center[:3] + children.center[3:], 2 * s.center[[1, 4, 7]])


def test_densify_clone_small():
    s = half_splats()
    grads = np.zeros(10)
    grads[2] = 1.0
    out, origin = densify_and_prune(s, grads, TrainConfig(percent_dense=0.5), scene_extent=2.0)
    assert len(out) == 11
    assert np.array_equal(out.center[10], s.center[2])


def test_densify_respects_cap():
    s = half_splats()
    out, _ = densify_and_prune(s, np.ones(10), TrainConfig(max_splats=12, percent_dense=0.5),
                               scene_extent=2.0)
    assert len(out) == 12


def test_reset_opacity():
    s = half_splats()
    s.opacity_raw[0] = logit(0.001)
    reset_opacity(s)
    assert np.allclose(s.opacity[1:], 0.01)
    assert s.opacity[0] == pytest.approx(0.001)


def test_remap_splat_moments(scene):
    model = init_model(scene.dataset(), quick_config())
    state = AdamState.for_model(model)
    m, _ = state.moments["splats/center"]
    m[:] = np.arange(len(m))[:, None]
    state.remap_splats(np.array([2, -1, 0]))
    assert np.array_equal(state.moments["splats/center"][0][:, 0], [2, 0, 0])


# training loop


def test_zero_iterations_is_initialization(scene, tmp_path):
    cfg = quick_config(iterations=0)
    result = train(scene.dataset(), cfg)
    init = init_model(scene.dataset(), cfg)
    for name, arr in init.splats.arrays().items():
        assert np.array_equal(getattr(result.model.splats, name), arr)
    assert np.array_equal(result.model.grid.base, init.grid.base)
    assert result.log == [LOG_HEADER]


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(Dataset([], "train", 0.5), quick_config())


def test_same_seed_identical_checkpoints(scene, tmp_path):
    paths = []
    for run in range(2):
        cfg = quick_config()
        result = train(scene.dataset(), cfg)
        path = tmp_path / f"run{run}.ckpt"
        save_checkpoint(path, result.model, cfg, result.optimizer, result.iterations)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    model, cfg, sec = load_checkpoint(paths[0])
    assert cfg.iterations == 20 and int(sec["adam/step"][0]) == 20


def test_log_format(scene):
    result = train(scene.dataset(), quick_config(iterations=12))
    assert result.log[0] == "iter,total_loss,L_rgb,L_d,L_n,train_psnr,n_splats"
    assert [line.split(",")[0] for line in result.log[1:]] == ["5", "10", "12"]
    assert all(len(line.split(",")) == 7 for line in result.log)


def test_loss_decreases_first_200_iterations(scene):
    ds = scene.dataset()
    fixed = Dataset(ds.frames[:1], "train", ds.camera_angle_x)
    cfg = quick_config(iterations=200, log_interval=1, densify_from=1000, lambda_d=0.0,
                       lambda_n=0.0)
    result = train(fixed, cfg)
    losses = np.array([float(line.split(",")[1]) for line in result.log[1:]])
    assert len(losses) == 200
    assert np.median(losses[-20:]) < np.median(losses[:20])
    assert frame_loss(result.model, fixed.frames[0].camera, fixed.frames[0].image, cfg) < losses[0]


def test_nonfinite_loss_aborts_with_dump(scene, tmp_path):
    ds = scene.dataset()
    ds.frames[0].image = np.full_like(ds.frames[0].image, np.nan)
    with pytest.raises(NonFiniteLossError):
        train(Dataset(ds.frames[:1], "train", ds.camera_angle_x), quick_config(), out_dir=tmp_path)
    names = os.listdir(tmp_path)
    assert any(n.endswith(".bin") for n in names) and any(n.endswith(".txt") for n in names)
