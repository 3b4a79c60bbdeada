import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfelshade.losses import (depth_to_normal, depth_to_normal_backward, loss_depth_distortion,
                                loss_normal_consistency, loss_rgb, pair_distortion_bruteforce,
                                ray_distortion, total_loss)
from surfelshade.metrics import SSIM_C1
from surfelshade.rasterizer import PerRayHits
from surfelshade.scene import Camera


def ident_camera(size=16, f=20.0):
    return Camera(size, size, f, f, size / 2, size / 2, np.eye(3), np.zeros(3))


def hits_from(weights, depths, splats=None, normals=None):
    w = np.asarray(weights, np.float64)
    z = np.asarray(depths, np.float64)
    count = np.count_nonzero(w > 0, axis=-1) if splats is None else np.sum(splats >= 0, axis=-1)
    if splats is None:
        splats = np.where(w > 0, 0, -1)
    if normals is None:
        normals = np.array([[0.0, 0.0, -1.0]])
    return PerRayHits(count, np.full(w.shape, -1), splats, w, z, normals)


# rgb


def test_rgb_identity():
    img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
    assert loss_rgb(img, img) == pytest.approx(0.0, abs=1e-12)


def test_rgb_constant_images():
    a, b = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    ssim = SSIM_C1 / (1 + SSIM_C1)
    assert loss_rgb(a, b) == pytest.approx(0.8 + 0.2 * (1 - ssim) / 2, abs=1e-12)
    assert loss_rgb(a, b) == pytest.approx(0.9, abs=1e-3)


def test_rgb_lambda_zero_is_l1():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, (12, 12, 3)), rng.uniform(0, 1, (12, 12, 3))
    assert loss_rgb(a, b, lam=0.0) == pytest.approx(np.mean(np.abs(a - b)), abs=1e-15)


def test_rgb_shape_mismatch():
    with pytest.raises(ValueError):
        loss_rgb(np.zeros((12, 12, 3)), np.zeros((12, 11, 3)))


def test_rgb_gradient():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 1, (12, 12, 3)), rng.uniform(0, 1, (12, 12, 3))
    _, g = loss_rgb(a, b, with_grad=True)
    for idx in [(0, 0, 0), (5, 6, 1), (11, 3, 2)]:
        d = np.zeros_like(a)
        d[idx] = 1e-6
        num = (loss_rgb(a + d, b) - loss_rgb(a - d, b)) / 2e-6
        assert num == pytest.approx(g[idx], rel=1e-5)


# depth distortion


def test_distortion_single_hit_zero():
    h = hits_from(np.full((4, 4, 1), 0.7), np.random.default_rng(0).uniform(1, 3, (4, 4, 1)))
    assert loss_depth_distortion(h) == 0.0


def test_distortion_two_hits():
    h = hits_from([[[0.5, 0.5]]], [[[1.0, 2.0]]])
    assert loss_depth_distortion(h) == pytest.approx(0.5, abs=1e-15)


def test_running_sum_matches_pairs_1e3():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        w, z = rng.uniform(0, 0.5, n), rng.uniform(0.5, 5, n)
        fast, _, _ = ray_distortion(w, z)
        worst = max(worst, abs(float(fast) - pair_distortion_bruteforce(w, z)))
    assert worst < 1e-10


def test_kernel_matches_reference():
    rng = np.random.default_rng(4)
    L = 9
    count = rng.integers(0, L + 1, (6, 7))
    valid = np.arange(L) < count[..., None]
    w = np.where(valid, rng.uniform(0, 0.3, (6, 7, L)), 0)
    z = np.where(valid, rng.uniform(1, 4, (6, 7, L)), 0)
    h = PerRayHits(count, np.full(w.shape, -1), np.where(valid, 0, -1), w, z, np.zeros((1, 3)))
    loss, gw, gz = loss_depth_distortion(h, with_grad=True)
    ref, rgw, rgz = ray_distortion(w, z, valid)
    n = np.count_nonzero(count)
    assert loss == pytest.approx(ref.sum() / n, rel=1e-12)
    assert np.allclose(gw, rgw / n, atol=1e-14)
    assert np.allclose(gz, rgz / n, atol=1e-14)


def test_distortion_gradient_fd():
    rng = np.random.default_rng(5)
    w, z = rng.uniform(0, 0.5, 7), rng.uniform(1, 3, 7)
    _, gw, gz = ray_distortion(w, z)
    for i in range(7):
        e = np.zeros(7)
        e[i] = 1e-5  # quadratic in w, piecewise linear in z: central differences are exact
        assert (ray_distortion(w + e, z)[0] - ray_distortion(w - e, z)[0]) / 2e-5 == \
            pytest.approx(gw[i], rel=1e-6)
        assert (ray_distortion(w, z + e)[0] - ray_distortion(w, z - e)[0]) / 2e-5 == \
            pytest.approx(gz[i], rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1), st.sampled_from([1.0, 1.5, 2.0, 3.0])),
                min_size=1, max_size=8))
def test_distortion_nonnegative_zero_iff_one_depth(pairs):
    w = np.array([p[0] for p in pairs])
    z = np.array([p[1] for p in pairs])
    loss = float(ray_distortion(w, z)[0])
    assert loss >= 0
    assert (loss == 0) == (len(set(z.tolist())) == 1)


# depth to normal


def test_fronto_parallel_plane():
    cam = ident_camera()
    n, mask = depth_to_normal(np.full((16, 16), 2.0), cam)
    assert mask[1:-1, 1:-1].all() and not mask[0].any()
    assert np.allclose(n[mask], [0, 0, -1], atol=1e-12)


def test_tilted_plane():
    cam = ident_camera(24, f=30.0)
    a, z0 = 0.4, 3.0
    xs = (np.arange(24) + 0.5 - 12) / 30.0
    # camera-space plane z = z0 + a X with X = x_ndc * z  =>  z = z0 / (1 - a x_ndc)
    z = np.tile(z0 / (1 - a * xs), (24, 1))
    n, mask = depth_to_normal(z, cam)
    expected = np.array([a, 0.0, -1.0]) / math.hypot(a, 1.0)
    assert np.abs(n[2:-2, 2:-2] - expected).max() < 1e-6


def test_one_pixel_masked():
    n, mask = depth_to_normal(np.ones((1, 1)), ident_camera(1))
    assert not mask.any() and not n.any()


def test_alpha_mask_excludes_uncovered_stencils():
    depth = np.full((8, 8), 2.0)
    alpha = np.ones((8, 8))
    alpha[4, 4] = 0.0
    _, mask = depth_to_normal(depth * alpha, ident_camera(8), alpha)
    for p in [(4, 4), (3, 4), (5, 4), (4, 3), (4, 5)]:
        assert not mask[p]
    assert mask[2, 2]


def test_depth_to_normal_backward_fd():
    rng = np.random.default_rng(6)
    cam = ident_camera(10)
    alpha = rng.uniform(0.5, 1.0, (10, 10))
    depth = alpha * (2.0 + 0.3 * rng.standard_normal((10, 10)))
    up = rng.standard_normal((10, 10, 3))
    n, mask, cache = depth_to_normal(depth, cam, alpha, with_cache=True)
    gd, ga = depth_to_normal_backward(cache, n, mask, up)

    def f(d, a):
        return float(np.sum(depth_to_normal(d, cam, a)[0] * up))

    for idx in [(3, 3), (5, 6), (8, 1)]:
        e = np.zeros((10, 10))
        e[idx] = 1e-6
        assert (f(depth + e, alpha) - f(depth - e, alpha)) / 2e-6 == pytest.approx(gd[idx], rel=1e-5)
        assert (f(depth, alpha + e) - f(depth, alpha - e)) / 2e-6 == pytest.approx(ga[idx], rel=1e-5)


# normal consistency


def _flat_hits(normal, size=8):
    w = np.ones((size, size, 1))
    return hits_from(w, np.full((size, size, 1), 2.0), np.zeros((size, size, 1), np.int64),
                     np.array([normal], float))


@pytest.mark.parametrize("normal, expected", [([0, 0, -1], 0.0), ([1, 0, 0], 1.0),
                                              ([0, 0, 1], 2.0)])
def test_normal_consistency_values(normal, expected):
    cam = ident_camera(8)
    h = _flat_hits(normal)
    assert loss_normal_consistency(h, np.full((8, 8), 2.0), cam, np.ones((8, 8))) == \
        pytest.approx(expected, abs=1e-12)


def test_normal_consistency_gradients_fd():
    rng = np.random.default_rng(7)
    cam = ident_camera(8)
    L = 3
    w = rng.uniform(0.05, 0.4, (8, 8, L))
    splats = rng.integers(0, 4, (8, 8, L))
    normals = rng.standard_normal((4, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    alpha = w.sum(-1)
    depth = alpha * (2.0 + 0.2 * rng.standard_normal((8, 8)))
    h = PerRayHits(np.full((8, 8), L), np.zeros((8, 8, L), np.int64), splats, w,
                   np.zeros((8, 8, L)), normals)
    loss, gw, gsn, gd, ga = loss_normal_consistency(h, depth, cam, alpha, with_grad=True)

    def f():
        return loss_normal_consistency(h, depth, cam, alpha)

    for arr, g, idx in [(w, gw, (3, 4, 1)), (normals, gsn, (2, 1)), (depth, gd, (4, 4)),
                        (alpha, ga, (3, 5))]:
        old = arr[idx]
        arr[idx] = old + 1e-6
        fp = f()
        arr[idx] = old - 1e-6
        fm = f()
        arr[idx] = old
        assert (fp - fm) / 2e-6 == pytest.approx(g[idx], rel=1e-5, abs=1e-10)


def test_total_loss_examples():
    assert total_loss(0.1, 0.001, 0.2, 100, 0.05) == pytest.approx(0.21, abs=1e-15)
    assert total_loss(0, 0, 0) == 0
    assert total_loss(0.3, 5.0, 7.0, 0.0, 0.0) == 0.3
