"""Deferred shading: reflection query, feature outer product, MLP decoder, tone mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RenderSettings
from .rasterizer import GBuffer, GBufferGrads
from .scene import Camera
from . import sphmip

SRGB_KNEE = 0.0031308


def reflect(w_i, n):
    """Mirror the incident direction about the normal: w_i - 2 (w_i . n) n."""
    w_i = np.asarray(w_i)
    n = np.asarray(n)
    return w_i - 2.0 * np.sum(w_i * n, axis=-1, keepdims=True) * n


def outer_flatten(k, s):
    """Row-major flattening of the outer product k s^T (index d*C + c)."""
    k = np.asarray(k)
    s = np.asarray(s)
    return (k[..., :, None] * s[..., None, :]).reshape(k.shape[:-1] + (k.shape[-1] * s.shape[-1],))


def srgb_gamma(x):
    x = np.asarray(x)
    return np.where(x <= SRGB_KNEE, 12.92 * x, 1.055 * np.power(np.maximum(x, SRGB_KNEE), 1 / 2.4) - 0.055)


def srgb_gamma_grad(x):
    x = np.asarray(x)
    return np.where(
        x <= SRGB_KNEE, 12.92, 1.055 / 2.4 * np.power(np.maximum(x, SRGB_KNEE), 1 / 2.4 - 1.0)
    )


class ShaderMLP:
    """ReLU MLP with an exponential output head.

    Parameters are stored as ``w1, b1, ..., w_out, b_out`` with weights shaped
    (fan_in, fan_out), so a layer computes ``x @ w + b``.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        n_hidden = sum(1 for k in params if k.startswith("w") and k != "w_out")
        self.names = [f"w{i}" for i in range(1, n_hidden + 1)] + ["w_out"]

    @classmethod
    def init(cls, in_dim=80, hidden=(256, 256), out_dim=3, seed=0, out_bias=math.log(0.05),
             out_scale=0.1, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = {}
        fan_in = in_dim
        for i, width in enumerate(hidden, start=1):
            bound = math.sqrt(6.0 / fan_in)
            params[f"w{i}"] = rng.uniform(-bound, bound, (fan_in, width)).astype(dtype)
            params[f"b{i}"] = np.zeros(width, dtype)
            fan_in = width
        bound = out_scale * math.sqrt(6.0 / (fan_in + out_dim))
        params["w_out"] = rng.uniform(-bound, bound, (fan_in, out_dim)).astype(dtype)
        params["b_out"] = np.full(out_dim, out_bias, dtype)
        return cls(params)

    @property
    def in_dim(self):
        return self.params[self.names[0]].shape[0]

    @property
    def hidden(self):
        return tuple(self.params[n].shape[1] for n in self.names[:-1])

    def copy(self) -> "ShaderMLP":
        return ShaderMLP({k: v.copy() for k, v in self.params.items()})

    def forward(self, x):
        acts = [x]
        h = x
        for name in self.names[:-1]:
            h = np.maximum(h @ self.params[name] + self.params["b" + name[1:]], 0.0)
            acts.append(h)
        out = np.exp(h @ self.params["w_out"] + self.params["b_out"])
        return out, (acts, out)

    def backward(self, cache, g_out):
        """Return (dL/dx, {param name: grad})."""
        acts, out = cache
        grads = {}
        g = g_out * out
        grads["w_out"] = acts[-1].T @ g
        grads["b_out"] = g.sum(axis=0)
        g = g @ self.params["w_out"].T
        for idx in range(len(self.names) - 2, -1, -1):
            name = self.names[idx]
            g = g * (acts[idx + 1] > 0)
            grads[name] = acts[idx].T @ g
            grads["b" + name[1:]] = g.sum(axis=0)
            g = g @ self.params[name].T
        return g, grads


def mlp_input(s, k):
    return np.concatenate([s, outer_flatten(k, s)], axis=-1)


def mlp_input_backward(s, k, g_x):
    C = s.shape[-1]
    D = k.shape[-1]
    g_outer = g_x[..., C:].reshape(g_x.shape[:-1] + (D, C))
    g_s = g_x[..., :C] + np.einsum("...d,...dc->...c", k, g_outer)
    g_k = np.einsum("...c,...dc->...d", s, g_outer)
    return g_s, g_k


def shade_pixel(s, k, mlp: ShaderMLP):
    """Specular RGB for directional feature ``s`` and spatial feature ``k``."""
    s = np.atleast_2d(s)
    k = np.atleast_2d(k)
    out, _ = mlp.forward(mlp_input(s, k))
    return out[0] if out.shape[0] == 1 else out


@dataclass
class ShadedImage:
    linear: np.ndarray  # (H, W, 3)
    srgb: np.ndarray  # (H, W, 3)
    specular: np.ndarray  # (H, W, 3), zero where uncovered
    mask: np.ndarray  # (H, W) bool: shaded pixels
    cache: dict | None = None


def compose(gbuffer: GBuffer, grid: sphmip.SphMipGrid, mlp: ShaderMLP, camera: Camera,
            settings: RenderSettings = None) -> ShadedImage:
    """Shade every covered pixel of the G-buffer and tone map to sRGB."""
    settings = settings or RenderSettings()
    H, W = gbuffer.shape
    dtype = gbuffer.diffuse.dtype
    bg = np.asarray(settings.background, dtype=dtype)
    mask = gbuffer.alpha > settings.coverage_eps
    idx = np.flatnonzero(mask.ravel())

    w_i = camera.world_rays(dtype).reshape(-1, 3)[idx]
    n = gbuffer.normal.reshape(-1, 3)[idx]
    rho = np.clip(gbuffer.roughness.reshape(-1)[idx], 0.0, 1.0)
    k = gbuffer.feature.reshape(-1, gbuffer.feature.shape[-1])[idx]
    w_r = reflect(w_i, n)
    # a degenerate (zero) normal reflects to w_i itself, which is still a valid query
    s = sphmip.query(grid, w_r, rho) if idx.size else np.zeros((0, grid.channels), dtype)
    x = mlp_input(s, k)
    spec, mlp_cache = mlp.forward(x) if idx.size else (np.zeros((0, 3), dtype), None)

    linear = np.broadcast_to(bg, (H * W, 3)).astype(dtype, copy=True)
    alpha = gbuffer.alpha.reshape(-1)[idx]
    linear[idx] = gbuffer.diffuse.reshape(-1, 3)[idx] + spec + (1.0 - alpha)[:, None] * bg
    specular = np.zeros((H * W, 3), dtype)
    specular[idx] = spec
    srgb_raw = srgb_gamma(linear)
    srgb = np.clip(srgb_raw, 0.0, 1.0)
    cache = dict(idx=idx, w_i=w_i, n=n, rho=rho, k=k, w_r=w_r, s=s, mlp_cache=mlp_cache,
                 linear=linear, srgb_raw=srgb_raw, bg=bg, grid=grid, mlp=mlp, shape=(H, W))
    return ShadedImage(
        linear=linear.reshape(H, W, 3),
        srgb=srgb.reshape(H, W, 3).astype(dtype),
        specular=specular.reshape(H, W, 3),
        mask=mask,
        cache=cache,
    )


def compose_backward(shaded: ShadedImage, grad_srgb):
    """Reverse of :func:`compose`.

    Returns ``(GBufferGrads, grad_grid_base, {mlp param: grad})``.
    """
    c = shaded.cache
    H, W = c["shape"]
    grid, mlp = c["grid"], c["mlp"]
    idx = c["idx"]
    dtype = c["linear"].dtype
    g = np.asarray(grad_srgb, dtype=dtype).reshape(-1, 3)
    raw = c["srgb_raw"]
    g_lin = np.where((raw >= 0.0) & (raw <= 1.0), g * srgb_gamma_grad(c["linear"]), 0.0)
    g_lin = g_lin[idx]

    g_diffuse = np.zeros((H * W, 3), dtype)
    g_diffuse[idx] = g_lin
    g_alpha = np.zeros(H * W, dtype)
    g_alpha[idx] = -g_lin @ c["bg"]

    D = c["k"].shape[-1]
    g_feature = np.zeros((H * W, D), dtype)
    g_rough = np.zeros(H * W, dtype)
    g_normal = np.zeros((H * W, 3), dtype)
    mlp_grads = {k: np.zeros_like(v) for k, v in mlp.params.items()}
    g_base = np.zeros_like(grid.base)
    if idx.size:
        g_x, mlp_grads = mlp.backward(c["mlp_cache"], g_lin)
        g_s, g_k = mlp_input_backward(c["s"], c["k"], g_x)
        g_base, g_wr, g_rho = sphmip.query_backward(grid, c["w_r"], c["rho"], g_s)
        w_i, n = c["w_i"], c["n"]
        wn = np.sum(w_i * n, axis=1, keepdims=True)
        gn = np.sum(g_wr * n, axis=1, keepdims=True)
        g_normal[idx] = -2.0 * (wn * g_wr + gn * w_i)
        g_feature[idx] = g_k
        g_rough[idx] = g_rho

    grads = GBufferGrads(
        diffuse=g_diffuse.reshape(H, W, 3),
        feature=g_feature.reshape(H, W, D),
        roughness=g_rough.reshape(H, W),
        normal=g_normal.reshape(H, W, 3),
        alpha=g_alpha.reshape(H, W),
    )
    return grads, g_base.astype(grid.base.dtype, copy=False), mlp_grads


def forward_shading_mode(gbuffer: GBuffer, splats, grid, mlp, camera: Camera,
                         settings: RenderSettings = None) -> np.ndarray:
    """Ablation renderer: shade every hit with its own splat attributes, then blend.

    Uses the same hit list, reflection, grid query and decoder as the deferred
    path; only the order of shading and blending differs. Returns sRGB.
    """
    settings = settings or RenderSettings()
    hits = gbuffer.hits
    H, W = gbuffer.shape
    dtype = gbuffer.diffuse.dtype
    bg = np.asarray(settings.background, dtype=dtype)
    valid = hits.splat >= 0
    pix, _ = np.nonzero(valid.reshape(H * W, -1))
    j = hits.splat.reshape(H * W, -1)[valid.reshape(H * W, -1)]
    w = hits.weight.reshape(H * W, -1)[valid.reshape(H * W, -1)]
    n = hits.normal.reshape(H * W, -1, 3)[valid.reshape(H * W, -1)]

    w_i = camera.world_rays(dtype).reshape(-1, 3)[pix]
    rho = np.asarray(splats.roughness, dtype)[j]
    k = np.asarray(splats.feature, dtype)[j]
    color = np.asarray(splats.diffuse, dtype)[j]
    if pix.size:
        s = sphmip.query(grid, reflect(w_i, n), rho)
        color = color + shade_pixel(s, k, mlp).reshape(-1, 3)

    linear = np.zeros((H * W, 3), dtype)
    np.add.at(linear, pix, w[:, None] * color)
    alpha = gbuffer.alpha.reshape(-1)
    mask = alpha > settings.coverage_eps
    linear = np.where(mask[:, None], linear + (1 - alpha)[:, None] * bg, bg)
    return np.clip(srgb_gamma(linear), 0.0, 1.0).reshape(H, W, 3)
