import math

import numpy as np
import pytest

from surfelshade.config import RenderSettings
from surfelshade.oracle import brute_force_render, finite_diff, gradient_error
from surfelshade.primitives import gaussian_weight, ray_splat_intersect
from surfelshade.rasterizer import GBufferGrads, cull_and_sort, rasterize, rasterize_backward
from surfelshade.scene import Camera, Splats, logit

ZEROED = RenderSettings(alpha_skip=0.0, t_min=0.0)


def random_splats(seed, n=60):
    rng = np.random.default_rng(seed)
    s = Splats.zeros(n)
    s.center[:] = rng.uniform(-0.8, 0.8, (n, 3))
    q = rng.standard_normal((n, 4))
    s.rotation[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    s.log_scale[:] = np.log(rng.uniform(0.1, 0.4, (n, 2)))
    s.opacity_raw[:] = rng.normal(0.5, 1.0, n)
    s.diffuse_raw[:] = rng.normal(0.0, 1.0, (n, 3))
    s.roughness_raw[:] = rng.normal(0.0, 1.0, n)
    s.feature[:] = rng.normal(0.0, 1.0, (n, 4))
    return s


def front_camera(size=32, eye=(0.2, -0.3, -3.0)):
    return Camera.look_at(eye, [0, 0, 0], [0, -1, 0], size, size, math.radians(50))


def facing_splat(center=(0, 0, 0), scale=1.0, opacity=0.5, color=(0.9, 0.2, 0.1)):
    s = Splats.zeros(1)
    s.center[0] = center
    s.log_scale[0] = math.log(scale)
    s.opacity_raw[0] = logit(opacity)
    s.diffuse_raw[0] = logit(np.asarray(color, float))
    return s


def render(splats, cam, settings=ZEROED):
    wl = cull_and_sort(splats, cam, settings.tile_size, settings)
    return wl, rasterize(splats, cam, wl, settings)


# primitives


def test_gaussian_weight_values():
    assert gaussian_weight(0.0, 0.0) == 1.0
    assert gaussian_weight(1.0, 0.0) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert gaussian_weight(3.0, 4.0) == pytest.approx(math.exp(-12.5), rel=1e-15)


def test_intersect_plane():
    u, v, t = ray_splat_intersect([0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1], [0.5, 0, 5], [0, 0, -1])
    assert (u, v) == pytest.approx((0.5, 0.0))
    assert np.allclose(np.array([0.5, 0, 5]) + t * np.array([0, 0, -1]), [0.5, 0, 0])


def test_intersect_scale_division():
    u, v, _ = ray_splat_intersect([0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 1], [0.5, 0, 5], [0, 0, -1])
    assert u == pytest.approx(0.25)


def test_intersect_parallel_miss():
    assert ray_splat_intersect([0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1], [0, 0, 1], [1, 0, 0]) is None


def test_intersect_behind_miss():
    assert ray_splat_intersect([0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1], [0, 0, 1], [0, 0, 1]) is None


# culling and sorting


def test_cull_behind_camera():
    cam = front_camera(64)
    s = facing_splat(center=(0, 0, -5))
    wl = cull_and_sort(s, cam, 16)
    assert len(wl.entries) == 0
    assert not wl.visible[0]


def test_whole_screen_splat_in_all_tiles():
    cam = front_camera(64, eye=(0, 0, -3))
    s = facing_splat(scale=20.0, opacity=0.99)
    wl = cull_and_sort(s, cam, 16)
    assert wl.tiles_x * wl.tiles_y == 16
    assert all(list(wl.tile_list(t)) == [0] for t in range(16))


def test_sort_near_far():
    cam = front_camera(16, eye=(0, 0, -3))
    s = Splats.concat([facing_splat(center=(0, 0, 1)), facing_splat(center=(0, 0, 0))])
    wl = cull_and_sort(s, cam, 16)
    assert list(wl.tile_list(0)) == [1, 0]


def test_tile_lists_sorted_and_complete():
    s = random_splats(3, 80)
    cam = front_camera(48)
    wl = cull_and_sort(s, cam, 16, ZEROED)
    for tile in range(wl.tiles_x * wl.tiles_y):
        z = wl.entry_depth[wl.offsets[tile]:wl.offsets[tile + 1]]
        assert np.all(np.diff(z) >= 0)
    _, gb = render(s, cam)
    ref, _ = brute_force_render(s, cam, ZEROED)
    # every splat that contributes anywhere is in the list of that pixel's tile
    for py in range(48):
        for px in range(48):
            tile = (py // 16) * wl.tiles_x + px // 16
            listed = set(wl.tile_list(tile).tolist())
            hit = ref.hits.splat[py, px, :ref.hits.count[py, px]]
            assert set(hit.tolist()) <= listed


# blending


def test_single_opaque_hit():
    cam = front_camera(16, eye=(0, 0, -3))
    s = facing_splat(scale=1e4, opacity=0.5)
    s.opacity_raw[0] = 40.0
    s.diffuse_raw[0] = [40.0, -40.0, -40.0]
    _, gb = render(s, cam)
    assert np.allclose(gb.diffuse[8, 8], [1, 0, 0], atol=1e-9)
    assert gb.alpha[8, 8] == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(gb.normal[8, 8], [0, 0, -1], atol=1e-6)


def test_two_half_hits():
    cam = front_camera(16, eye=(0, 0, -3))
    red = facing_splat(center=(0, 0, 0), scale=1e4, opacity=0.5)
    green = facing_splat(center=(0, 0, 1), scale=1e4, opacity=0.5)
    red.diffuse_raw[0] = [40.0, -40.0, -40.0]
    green.diffuse_raw[0] = [-40.0, 40.0, -40.0]
    _, gb = render(Splats.concat([red, green]), cam)
    assert np.allclose(gb.diffuse[8, 8], [0.5, 0.25, 0.0], atol=1e-6)
    assert gb.alpha[8, 8] == pytest.approx(0.75, abs=1e-6)


def test_empty_scene():
    cam = front_camera(16)
    _, gb = render(Splats.empty(), cam)
    for plane in gb.planes().values():
        assert np.all(plane == 0)


def test_gbuffer_invariants():
    s = random_splats(5, 80)
    cam = front_camera(32)
    _, gb = render(s, cam, RenderSettings())
    assert gb.alpha.min() >= 0 and gb.alpha.max() <= 1
    assert np.abs(gb.hits.weight.sum(axis=-1) - gb.alpha).max() < 1e-6
    n = np.linalg.norm(gb.normal, axis=-1)
    covered = gb.alpha > 1e-4
    assert np.abs(n[covered] - 1).max() < 1e-6
    assert np.all(n[~covered] == 0)


def test_transmittance_telescoping():
    s = random_splats(6, 80)
    cam = front_camera(32)
    _, gb = render(s, cam, RenderSettings())
    w = gb.hits.weight
    T = 1.0 - np.cumsum(w, axis=-1)
    assert np.abs(gb.alpha + T[..., -1] - 1.0).max() < 1e-6


def test_depth_monotone_per_ray_sort():
    s = random_splats(7, 80)
    cam = front_camera(32)
    _, gb = render(s, cam, RenderSettings(per_ray_sort=True))
    d = gb.hits.depth
    valid = gb.hits.valid
    for k in range(1, d.shape[-1]):
        both = valid[..., k]
        assert np.all(d[..., k][both] >= d[..., k - 1][both])


@pytest.mark.parametrize("seed", range(10))
def test_oracle_zeroed_thresholds(seed):
    rng = np.random.default_rng(100 + seed)
    s = random_splats(seed, int(rng.integers(20, 101)))
    cam = front_camera(32, eye=rng.uniform(-1, 1, 3) + [0, 0, -3.5])
    _, gb = render(s, cam)
    ref, _ = brute_force_render(s, cam, ZEROED)
    for name, plane in gb.planes().items():
        assert np.abs(plane - ref.planes()[name]).max() < 1e-6, name


@pytest.mark.parametrize("seed", range(3))
def test_oracle_ray_order_matches_per_ray_sort(seed):
    rng = np.random.default_rng(100 + seed)
    s = random_splats(seed, int(rng.integers(20, 101)))
    cam = front_camera(32, eye=rng.uniform(-1, 1, 3) + [0, 0, -3.5])
    _, gb = render(s, cam, RenderSettings(alpha_skip=0.0, t_min=0.0, per_ray_sort=True))
    ref, _ = brute_force_render(s, cam, ZEROED, order="ray")
    for name, plane in gb.planes().items():
        assert np.abs(plane - ref.planes()[name]).max() < 1e-6, name


def test_oracle_default_thresholds():
    # a skipped hit can carry up to 1/255 of an attribute, well above 5e-4,
    # so this tolerance is not expected to hold (see the decision ledger)
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        s = random_splats(seed, int(rng.integers(20, 101)))
        cam = front_camera(32, eye=rng.uniform(-1, 1, 3) + [0, 0, -3.5])
        _, gb = render(s, cam, RenderSettings())
        ref, _ = brute_force_render(s, cam, ZEROED)
        for name in ("diffuse", "feature", "roughness", "depth", "alpha"):
            worst = max(worst, float(np.abs(gb.planes()[name] - ref.planes()[name]).max()))
    assert worst < 5e-4


def test_early_termination_only_matches_oracle():
    for seed in range(3):
        s = random_splats(seed, 80)
        cam = front_camera(32)
        _, gb = render(s, cam, RenderSettings(alpha_skip=0.0))
        ref, _ = brute_force_render(s, cam, ZEROED)
        for name in ("diffuse", "feature", "roughness", "depth", "alpha"):
            assert np.abs(gb.planes()[name] - ref.planes()[name]).max() < 5e-4


# backward


def test_feature_gradient_linear_blend():
    cam = front_camera(16, eye=(0, 0, -3))
    s = facing_splat(scale=1e4, opacity=0.7)
    wl, gb = render(s, cam)
    g = np.zeros_like(gb.feature)
    g[8, 8] = [1.0, 2.0, 3.0, 4.0]
    out = rasterize_backward(s, cam, wl, gb, GBufferGrads(feature=g), ZEROED)
    w = gb.hits.weight[8, 8, 0]
    assert w == pytest.approx(0.7, abs=1e-6)
    assert np.allclose(out["feature"][0], w * np.array([1, 2, 3, 4]), atol=1e-12)
    # the same number by central differences
    def loss():
        _, gb2 = render(s, cam)
        return float(np.sum(gb2.feature * g))
    num = finite_diff(loss, s.feature, eps=1e-5)
    assert np.allclose(num[0], out["feature"][0], atol=1e-8)


def test_zero_upstream_zero_grads():
    s = random_splats(2, 30)
    cam = front_camera(16)
    wl, gb = render(s, cam)
    out = rasterize_backward(s, cam, wl, gb, GBufferGrads(), ZEROED)
    for arr in out.values():
        assert np.all(arr == 0)


def test_gbuffer_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    s = random_splats(11, 20)
    cam = front_camera(16)
    wl, gb = render(s, cam)
    up = {name: rng.standard_normal(p.shape) for name, p in gb.planes().items()}
    grads = GBufferGrads(diffuse=up["diffuse"], feature=up["feature"],
                         roughness=up["roughness"][..., 0], normal=up["normal"],
                         depth=up["depth"][..., 0], alpha=up["alpha"][..., 0])
    out = rasterize_backward(s, cam, wl, gb, grads, ZEROED)

    def loss():
        _, g2 = render(s, cam)
        return float(sum(np.sum(p * up[k]) for k, p in g2.planes().items()))

    for name in ("center", "rotation", "log_scale", "opacity_raw", "diffuse_raw",
                 "roughness_raw", "feature"):
        num = finite_diff(loss, getattr(s, name), eps=1e-6)
        assert gradient_error(out[name], num).max() < 1, name


def test_backward_rejects_foreign_worklist():
    s = random_splats(1, 10)
    cam = front_camera(16)
    wl, gb = render(s, cam)
    with pytest.raises(AssertionError):
        rasterize_backward(s, front_camera(16), wl, gb, GBufferGrads(), ZEROED)
