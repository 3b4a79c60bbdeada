"""Full-frame forward and backward through rasterizer, shader and losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sphmip
from .config import ModelConfig, RenderSettings, TrainConfig
from .losses import LossTerms, frame_losses
from .rasterizer import GBuffer, cull_and_sort, rasterize, rasterize_backward
from .scene import Camera, Splats
from .shader import ShadedImage, ShaderMLP, compose, compose_backward


@dataclass
class Model:
    """All learnable state: splats, grid base and shader weights."""

    splats: Splats
    grid: sphmip.SphMipGrid
    mlp: ShaderMLP

    @classmethod
    def create(cls, splats: Splats, model_config: ModelConfig = None, seed=0, dtype=np.float32):
        mc = model_config or ModelConfig()
        grid = sphmip.SphMipGrid.random(mc.grid_height, mc.grid_width, mc.grid_channels,
                                        mc.grid_levels, seed=seed, dtype=dtype)
        mlp = ShaderMLP.init(mc.mlp_input_dim, mc.hidden, seed=seed + 1, dtype=dtype)
        return cls(splats.astype(dtype), grid, mlp)

    def copy(self) -> "Model":
        return Model(self.splats.copy(), self.grid.copy(), self.mlp.copy())

    def astype(self, dtype) -> "Model":
        grid = sphmip.SphMipGrid(self.grid.base.astype(dtype), self.grid.n_levels)
        mlp = ShaderMLP({k: v.astype(dtype) for k, v in self.mlp.params.items()})
        return Model(self.splats.astype(dtype), grid, mlp)


@dataclass
class FrameResult:
    gbuffer: GBuffer
    shaded: ShadedImage
    worklist: object
    losses: LossTerms | None = None


@dataclass
class Gradients:
    """Parameter-shaped gradient accumulators for one backward pass."""

    splats: dict
    grid: np.ndarray
    mlp: dict


def render(model: Model, camera: Camera, settings: RenderSettings = None) -> FrameResult:
    settings = settings or RenderSettings()
    worklist = cull_and_sort(model.splats, camera, settings.tile_size, settings)
    gbuffer = rasterize(model.splats, camera, worklist, settings)
    shaded = compose(gbuffer, model.grid, model.mlp, camera, settings)
    return FrameResult(gbuffer, shaded, worklist)


def forward_backward(model: Model, camera: Camera, target, config: TrainConfig):
    """Render one frame, evaluate every loss term and backpropagate to all parameters."""
    settings = config.render
    res = render(model, camera, settings)
    terms, g_srgb, geo_grads = frame_losses(res.shaded.srgb, target, res.gbuffer, camera,
                                            config, settings.coverage_eps)
    res.losses = terms
    shade_grads, g_grid, g_mlp = compose_backward(res.shaded, g_srgb)
    g_splats = rasterize_backward(model.splats, camera, res.worklist, res.gbuffer,
                                  shade_grads.add(geo_grads), settings)
    return res, Gradients(g_splats, g_grid, g_mlp)


def frame_loss(model: Model, camera: Camera, target, config: TrainConfig) -> float:
    settings = config.render
    res = render(model, camera, settings)
    terms, _, _ = frame_losses(res.shaded.srgb, target, res.gbuffer, camera, config,
                               settings.coverage_eps)
    return terms.total
