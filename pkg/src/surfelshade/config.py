"""Configuration dataclasses shared by the renderer, trainer and CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


@dataclass
class RenderSettings:
    """Rasterization and composition knobs.

    ``alpha_skip`` and ``t_min`` are the contribution-skip and early-termination
    thresholds; gradient and oracle tests set both to zero.
    """

    tile_size: int = 16
    z_near: float = 0.01
    alpha_skip: float = 1.0 / 255.0
    t_min: float = 1e-4
    per_ray_sort: bool = False
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    coverage_eps: float = 1e-4


@dataclass
class ModelConfig:
    grid_height: int = 512
    grid_width: int = 1024
    grid_channels: int = 16
    grid_levels: int = 9
    feature_dim: int = 4
    hidden: tuple[int, ...] = (256, 256)

    @property
    def mlp_input_dim(self) -> int:
        return self.grid_channels + self.feature_dim * self.grid_channels


@dataclass
class TrainConfig:
    lambda_ssim: float = 0.2
    lambda_d: float = 100.0
    lambda_n: float = 0.05
    iterations: int = 30000
    seed: int = 0
    precision: str = "float32"
    # iteration from which lambda_d and lambda_n apply; before it only L_rgb is optimized
    geometry_from: int = 0

    # Adam
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_diffuse: float = 2.5e-2
    lr_roughness: float = 1e-2
    lr_feature: float = 1e-2
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3

    # initialization
    init_count: int = 2000
    init_box: tuple[float, ...] = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
    k_init: float = 1.0

    # simplified split/clone/prune schedule
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000
    max_splats: int = 200000

    log_interval: int = 100
    checkpoint_interval: int = 0

    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_d", "lambda_n"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        import numpy as np

        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = ModelConfig(**_tuplify(data.pop("model", {})))
        render = RenderSettings(**_tuplify(data.pop("render", {})))
        return cls(model=model, render=render, **_tuplify(data))


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
