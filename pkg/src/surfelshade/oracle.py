"""Reference machinery for verification: a brute-force renderer, a finite-difference
gradient checker and synthetic scene generators.

The brute-force renderer shares only the Gaussian weight and the ray/plane
intersection with the tiled rasterizer. It works in world space, intersects
every splat at every pixel, and never skips or terminates early.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import sphmip
from .config import ModelConfig, RenderSettings
from .primitives import gaussian_weight, intersect
from .rasterizer import GBuffer, PerRayHits
from .scene import Camera, Dataset, Frame, Splats, logit, splat_frame, write_manifest, write_png
from .shader import ShaderMLP, compose, mlp_input

SCENE_KINDS = ("mirror_plane", "textured_ball", "random")


def brute_force_render(splats: Splats, camera: Camera, settings: RenderSettings = None,
                       grid=None, mlp=None, order="center"):
    """Per-pixel reference render over all splats.

    ``order="center"`` blends hits by splat-center view depth (ties by index),
    the same rule as the tiled rasterizer; ``order="ray"`` sorts by the depth
    of each ray's own intersection. Returns ``(GBuffer, srgb)``; ``srgb`` is
    None unless both ``grid`` and ``mlp`` are given.
    """
    settings = settings or RenderSettings()
    H, W = camera.height, camera.width
    n = len(splats)
    D = splats.feature.shape[1]
    t_u, t_v, n_w = splat_frame(splats.rotation)
    centers = np.asarray(splats.center, np.float64)
    scale = np.asarray(splats.scale, np.float64)
    opacity = np.asarray(splats.opacity, np.float64)
    eye = camera.center
    view_depth = (centers - eye) @ camera.R[2]
    facing = np.where(np.sum(n_w * (centers - eye), axis=1) > 0, -1.0, 1.0)
    n_face = n_w * facing[:, None]
    attrs = np.concatenate([np.asarray(splats.diffuse, np.float64),
                            np.asarray(splats.feature, np.float64),
                            np.asarray(splats.roughness, np.float64)[:, None], n_face], axis=1)
    live = [j for j in range(n) if view_depth[j] > settings.z_near]
    live.sort(key=lambda j: (view_depth[j], j))

    rays = camera.world_rays(np.float64)
    n_attr = attrs.shape[1]
    out = np.zeros((H, W, n_attr))
    depth = np.zeros((H, W))
    trans = np.ones((H, W))
    per_pixel = {}
    L = 1
    for py in range(H):
        for px in range(W):
            d = rays[py, px]
            hits = []
            for j in live:
                ok, u, v, t = intersect(centers[j], t_u[j], t_v[j], n_w[j], scale[j, 0],
                                        scale[j, 1], eye, d, settings.z_near)
                if ok:
                    z = t * float(d @ camera.R[2])
                    hits.append((j, opacity[j] * gaussian_weight(u, v), z))
            if order == "ray":
                hits.sort(key=lambda h: (h[2], h[0]))
            T = 1.0
            rec = []
            for j, a, z in hits:
                w = a * T
                out[py, px] += w * attrs[j]
                depth[py, px] += w * z
                rec.append((j, w, z))
                T *= 1.0 - a
            trans[py, px] = T
            per_pixel[py, px] = rec
            L = max(L, len(rec))

    splat_idx = np.full((H, W, L), -1, np.int64)
    weight = np.zeros((H, W, L))
    hit_z = np.zeros((H, W, L))
    count = np.zeros((H, W), np.int64)
    for (py, px), rec in per_pixel.items():
        count[py, px] = len(rec)
        for k, (j, w, z) in enumerate(rec):
            splat_idx[py, px, k] = j
            weight[py, px, k] = w
            hit_z[py, px, k] = z

    alpha = 1.0 - trans
    normal_raw = out[..., 3 + D + 1:]
    norm = np.linalg.norm(normal_raw, axis=-1, keepdims=True)
    covered = (alpha[..., None] > settings.coverage_eps) & (norm > 1e-12)
    normal = np.where(covered, normal_raw / np.where(norm > 0, norm, 1.0), 0.0)
    gbuffer = GBuffer(
        diffuse=out[..., :3],
        feature=out[..., 3:3 + D],
        roughness=out[..., 3 + D],
        normal=normal,
        depth=depth,
        alpha=alpha,
        hits=PerRayHits(count, np.full_like(splat_idx, -1), splat_idx, weight, hit_z, n_face),
        normal_raw=normal_raw,
    )
    srgb = None
    if grid is not None and mlp is not None:
        srgb = compose(gbuffer, grid, mlp, camera, settings).srgb
    return gbuffer, srgb


def finite_diff(loss_fn, param, eps=1e-4, indices=None):
    """Central differences of ``loss_fn()`` w.r.t. the array ``param`` (edited in place).

    Quaternions need no special handling: the renderer normalizes them inside
    the forward pass, so perturbing the raw entries matches the analytic path.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    param = np.asarray(param)
    grad = np.zeros(param.shape)
    for idx in (np.ndindex(param.shape) if indices is None else indices):
        old = param[idx]
        param[idx] = old + eps
        f_plus = loss_fn()
        param[idx] = old - eps
        f_minus = loss_fn()
        param[idx] = old
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite loss at perturbed index {idx}")
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def gradient_error(analytic, numeric, small=1e-6, abs_tol=1e-7):
    """Per-scalar error normalized so that values below 1 pass.

    Relative error ``|a - n| / max(|a|, |n|)`` is scored against 1e-3; where
    the analytic value is below ``small`` the absolute error is scored against
    ``abs_tol`` instead.
    """
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    diff = np.abs(a - n)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    return np.where(np.abs(a) < small, diff / abs_tol, rel / 1e-3)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticScene:
    kind: str
    seed: int
    splats: Splats
    grid: sphmip.SphMipGrid
    mlp: ShaderMLP
    cameras: list[Camera]
    images: list[np.ndarray] = field(default_factory=list)
    alphas: list[np.ndarray] = field(default_factory=list)
    normals: list[np.ndarray] = field(default_factory=list)
    plane_normal: np.ndarray | None = None

    def dataset(self, split="train") -> Dataset:
        frames = [Frame(c, img, f"r_{i:03d}", a, n) for i, (c, img, a, n) in
                  enumerate(zip(self.cameras, self.images, self.alphas, self.normals))]
        return Dataset(frames, split, 2.0 * math.atan(self.cameras[0].width
                                                       / (2.0 * self.cameras[0].fx)))


def procedural_environment(directions):
    """Smooth 16-channel directional field: a sky gradient, a sun lobe and low-order bands."""
    w = np.asarray(directions, np.float64)
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    sun = np.array([0.4, 0.3, 0.866])
    sun /= np.linalg.norm(sun)
    lobe = np.exp(12.0 * (w @ sun - 1.0))
    horizon = np.exp(-8.0 * z * z)
    phi = np.arctan2(y, x)
    chans = [
        np.ones_like(x), x, y, z, np.maximum(z, 0.0), lobe, horizon, x * y,
        y * z, x * z, x * x - y * y, 3 * z * z - 1, np.sin(2 * phi) * (1 - z * z),
        np.cos(3 * phi) * (1 - z * z), np.maximum(-z, 0.0), lobe * z,
    ]
    return np.stack(chans, axis=-1)


def environment_grid(height, width, levels, channels=16, dtype=np.float64):
    """Bake :func:`procedural_environment` into a grid at texel centers."""
    theta = (np.arange(height) + 0.5) / height * np.pi
    phi = (np.arange(width) + 0.5) / width * 2 * np.pi - np.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    env = procedural_environment(dirs)
    if channels <= env.shape[-1]:
        env = env[..., :channels]
    else:
        env = np.concatenate([env, np.zeros(env.shape[:2] + (channels - env.shape[-1],))], -1)
    return sphmip.SphMipGrid(env.astype(dtype), levels)


def camera_ring(n, radius, elevation, width, height, fov_x, target=(0.0, 0.0, 0.0),
                phase=0.0):
    """``n`` cameras evenly spaced in azimuth, looking at ``target`` (z is up)."""
    cams = []
    target = np.asarray(target, np.float64)
    for i in range(n):
        az = phase + 2.0 * math.pi * i / n
        eye = target + radius * np.array([math.cos(elevation) * math.cos(az),
                                          math.cos(elevation) * math.sin(az),
                                          math.sin(elevation)])
        cams.append(Camera.look_at(eye, target, (0.0, 0.0, 1.0), width, height, fov_x))
    return cams


def _random_splats(rng, n, extent, feature_dim):
    s = Splats.zeros(n, feature_dim)
    s.center[:] = rng.uniform(-extent, extent, (n, 3))
    q = rng.standard_normal((n, 4))
    s.rotation[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    s.log_scale[:] = np.log(rng.uniform(0.15, 0.35, (n, 2)) * extent)
    s.opacity_raw[:] = rng.normal(1.0, 1.0, n)
    s.diffuse_raw[:] = rng.normal(-0.5, 1.0, (n, 3))
    s.roughness_raw[:] = rng.normal(0.0, 1.0, n)
    s.feature[:] = rng.normal(0.0, 1.0, (n, feature_dim))
    return s


def _mirror_plane_splats(rng, per_side, half, feature_dim):
    g = (np.arange(per_side) + 0.5) / per_side * 2 * half - half
    gx, gy = np.meshgrid(g, g, indexing="ij")
    n = per_side * per_side
    s = Splats.zeros(n, feature_dim)
    s.center[:, 0] = gx.ravel()
    s.center[:, 1] = gy.ravel()
    s.rotation[:, 0] = 1.0  # identity frame: normal along +z
    s.log_scale[:] = math.log(1.2 * half / per_side)
    s.opacity_raw[:] = logit(0.95)
    s.diffuse_raw[:] = logit(0.05)
    s.roughness_raw[:] = logit(0.01)
    s.feature[:] = rng.normal(0.0, 0.5, (n, feature_dim)) + 1.0
    return s


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = math.pi * (3 - math.sqrt(5)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _frame_quaternion(normal):
    """Unit quaternion (w, x, y, z) whose rotation maps +z onto ``normal``."""
    n = normal / np.linalg.norm(normal)
    zhat = np.array([0.0, 0.0, 1.0])
    c = float(n @ zhat)
    if c < -1 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(zhat, n)
    q = np.array([1.0 + c, axis[0], axis[1], axis[2]])
    return q / np.linalg.norm(q)


def _textured_ball_splats(rng, n, radius, feature_dim):
    dirs = _fibonacci_sphere(n)
    s = Splats.zeros(n, feature_dim)
    s.center[:] = radius * dirs
    s.rotation[:] = np.stack([_frame_quaternion(d) for d in dirs])
    s.log_scale[:] = math.log(radius * 2.2 / math.sqrt(n))
    s.opacity_raw[:] = logit(0.9)
    stripes = 0.5 + 0.4 * np.sin(6 * np.arctan2(dirs[:, 1], dirs[:, 0]))[:, None]
    base = np.stack([stripes[:, 0], 0.5 + 0.4 * dirs[:, 2], 1 - stripes[:, 0]], axis=1)
    s.diffuse_raw[:] = logit(np.clip(base, 0.05, 0.95))
    s.roughness_raw[:] = logit(0.6)
    s.feature[:] = rng.normal(0.0, 0.3, (n, feature_dim))
    return s


def make_scene(kind, seed=0, n_views=8, width=64, height=64, model_config: ModelConfig = None,
               n_splats=None, fov_x=math.radians(45.0), settings: RenderSettings = None):
    """Build a synthetic scene with ground truth rendered by :func:`brute_force_render`.

    The reference appearance is a procedural environment baked into a grid of
    the given ``model_config`` size plus a frozen, seeded MLP of the same
    architecture that the trainer will learn.
    """
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    mc = model_config or ModelConfig(grid_height=32, grid_width=64, grid_levels=5,
                                     hidden=(64, 64))
    settings = settings or RenderSettings()
    rng = np.random.default_rng(seed)
    D = mc.feature_dim
    plane_normal = None
    if kind == "random":
        splats = _random_splats(rng, n_splats or 64, 0.6, D)
        cams = camera_ring(n_views, 3.0, math.radians(25.0), width, height, fov_x)
    elif kind == "mirror_plane":
        splats = _mirror_plane_splats(rng, int(round(math.sqrt(n_splats or 144))), 1.0, D)
        cams = camera_ring(n_views, 3.2, math.radians(50.0), width, height, fov_x)
        plane_normal = np.array([0.0, 0.0, 1.0])
    else:
        splats = _textured_ball_splats(rng, n_splats or 400, 0.8, D)
        cams = camera_ring(n_views, 3.0, math.radians(20.0), width, height, fov_x)

    grid = environment_grid(mc.grid_height, mc.grid_width, mc.grid_levels, mc.grid_channels)
    mlp = ShaderMLP.init(mc.mlp_input_dim, mc.hidden, seed=seed + 1000,
                         out_bias=math.log(0.1), out_scale=1.0, dtype=np.float64)
    scene = SyntheticScene(kind, seed, splats, grid, mlp, cams, plane_normal=plane_normal)
    for cam in cams:
        gb, srgb = brute_force_render(splats, cam, settings, grid, mlp)
        scene.images.append(srgb)
        scene.alphas.append(gb.alpha)
        if plane_normal is not None:
            covered = (gb.alpha > settings.coverage_eps)[..., None]
            scene.normals.append(np.where(covered, plane_normal, 0.0))
        else:
            scene.normals.append(gb.normal)
    return scene


def write_scene(scene: SyntheticScene, path, n_test=0):
    """Write the scene as a dataset directory (RGB, alpha and normal PNGs plus manifests)."""
    os.makedirs(path, exist_ok=True)
    n_train = len(scene.cameras) - n_test
    for split, lo, hi in (("train", 0, n_train), ("test", n_train, len(scene.cameras))):
        if hi <= lo and split == "test":
            continue
        sub = os.path.join(path, split)
        os.makedirs(sub, exist_ok=True)
        frames, extra = [], []
        for i in range(lo, hi):
            # the shaded image is already final (specular is not alpha-weighted), so it is
            # stored as RGB with coverage in a separate plane rather than as RGBA
            write_png(os.path.join(sub, f"r_{i:03d}.png"), scene.images[i])
            write_png(os.path.join(sub, f"r_{i:03d}_alpha.png"), scene.alphas[i][..., None])
            write_png(os.path.join(sub, f"r_{i:03d}_normal.png"), (scene.normals[i] + 1) / 2)
            frames.append(Frame(scene.cameras[i], scene.images[i], f"./{split}/r_{i:03d}"))
            extra.append({"alpha_path": f"./{split}/r_{i:03d}_alpha.png",
                          "normal_path": f"./{split}/r_{i:03d}_normal.png"})
        cam = scene.cameras[0]
        ds = Dataset(frames, split, 2.0 * math.atan(cam.width / (2.0 * cam.fx)))
        write_manifest(ds, path, split, extra)
    meta = {"kind": scene.kind, "seed": scene.seed, "n_splats": len(scene.splats)}
    if scene.plane_normal is not None:
        meta["plane_normal"] = scene.plane_normal.tolist()
    with open(os.path.join(path, "scene.json"), "w") as f:
        json.dump(meta, f, indent=2)


def condition_relu_margins(mlp: ShaderMLP, x, margin=0.02):
    """Shift hidden biases so no pre-activation over ``x`` lies within ``margin`` of zero.

    Central differences are only a valid reference where the loss is smooth
    across the stencil; this keeps every ReLU away from its kink.
    """
    h = x
    candidates = sorted(np.linspace(-1.0, 1.0, 4001), key=abs)
    for name in mlp.names[:-1]:
        b = "b" + name[1:]
        pre = h @ mlp.params[name] + mlp.params[b]
        for u in range(pre.shape[1]):
            col = pre[:, u]
            if col.size == 0 or np.abs(col).min() >= margin:
                continue
            for delta in candidates:
                if np.abs(col + delta).min() >= margin:
                    mlp.params[b][u] += delta
                    break
        h = np.maximum(h @ mlp.params[name] + mlp.params[b], 0.0)
    return mlp


def gradcheck_scene(seed=0, size=16, n_splats=20, grid_shape=(4, 8), levels=2, hidden=8):
    """The small double-precision configuration used for end-to-end gradient checks.

    Returns ``(model, camera, target)``; thresholds are meant to be zeroed by
    the caller's render settings.
    """
    from .pipeline import Model, render

    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0.3, -0.2, -3.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], size, size,
                         math.pi / 3)
    s = Splats.zeros(n_splats)
    s.center[:] = rng.uniform(-0.7, 0.7, (n_splats, 3))
    q = rng.standard_normal((n_splats, 4))
    s.rotation[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    # near edge-on splats make the intersection ill-conditioned (1 / cos of the view angle),
    # so finite differences at the prescribed step are no longer a valid reference there
    view = s.center - cam.center
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    for j in range(n_splats):
        while abs(float(splat_frame(s.rotation[j])[2] @ view[j])) < 0.25:
            q = rng.standard_normal(4)
            s.rotation[j] = q / np.linalg.norm(q)
    s.log_scale[:] = np.log(rng.uniform(0.2, 0.5, (n_splats, 2)))
    s.opacity_raw[:] = rng.normal(0.0, 1.0, n_splats)
    s.diffuse_raw[:] = rng.normal(-1.0, 1.0, (n_splats, 3))
    s.roughness_raw[:] = rng.normal(0.0, 1.0, n_splats)
    s.feature[:] = rng.normal(0.0, 1.0, (n_splats, 4))
    grid = sphmip.SphMipGrid(rng.uniform(-1.0, 1.0, grid_shape + (16,)), levels)
    mlp = ShaderMLP.init(80, (hidden, hidden), seed=seed + 1, out_bias=math.log(0.1),
                         out_scale=0.5, dtype=np.float64)
    model = Model(s, grid, mlp)
    settings = RenderSettings(alpha_skip=0.0, t_min=0.0)
    c = render(model, cam, settings).shaded.cache
    if c["idx"].size:
        condition_relu_margins(mlp, mlp_input(c["s"], c["k"]))
    target = rng.uniform(0.0, 1.0, (size, size, 3))
    return model, cam, target
