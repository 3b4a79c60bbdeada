"""Adam optimizer, simplified densification and the training loop."""

from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import sphmip
from .config import TrainConfig
from .metrics import psnr
from .pipeline import Model, forward_backward
from .scene import SPLAT_FIELDS, Dataset, Splats, init_splats, logit

LOG_HEADER = "iter,total_loss,L_rgb,L_d,L_n,train_psnr,n_splats"


class NonFiniteLossError(RuntimeError):
    pass


def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction; ``step`` counts from 1."""
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    return param


_SPLAT_LR = {
    "center": "lr_position",
    "rotation": "lr_rotation",
    "log_scale": "lr_scale",
    "opacity_raw": "lr_opacity",
    "diffuse_raw": "lr_diffuse",
    "roughness_raw": "lr_roughness",
    "feature": "lr_feature",
}


def position_lr(config: TrainConfig, iteration):
    """Exponential decay from ``lr_position`` to ``lr_position_final``."""
    if config.iterations <= 1:
        return config.lr_position
    t = min(max(iteration / (config.iterations - 1), 0.0), 1.0)
    return math.exp((1 - t) * math.log(config.lr_position) + t * math.log(config.lr_position_final))


@dataclass
class AdamState:
    """First and second moments for every learnable tensor plus the step counter."""

    moments: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model: Model):
        state = cls()
        for key, arr in _param_items(model):
            state.moments[key] = (np.zeros_like(arr), np.zeros_like(arr))
        return state

    def remap_splats(self, origin):
        """Carry splat moments through densification; new splats (origin -1) start at zero."""
        keep = origin >= 0
        src = np.maximum(origin, 0)
        for name in SPLAT_FIELDS:
            key = f"splats/{name}"
            m, v = self.moments[key]
            mask = keep.reshape((-1,) + (1,) * (m.ndim - 1))
            self.moments[key] = (np.where(mask, m[src], 0).astype(m.dtype),
                                 np.where(mask, v[src], 0).astype(v.dtype))


def _param_items(model: Model):
    for name in SPLAT_FIELDS:
        yield f"splats/{name}", getattr(model.splats, name)
    yield "grid/base", model.grid.base
    for name, arr in model.mlp.params.items():
        yield f"mlp/{name}", arr


def apply_gradients(model: Model, grads, state: AdamState, config: TrainConfig, iteration):
    """Adam step on every learnable tensor, then renormalize quaternions and rebuild the pyramid."""
    state.step += 1
    kw = dict(step=state.step, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    for name in SPLAT_FIELDS:
        lr = position_lr(config, iteration) if name == "center" else getattr(config, _SPLAT_LR[name])
        m, v = state.moments[f"splats/{name}"]
        g = np.asarray(grads.splats[name], dtype=m.dtype)
        adam_step(getattr(model.splats, name), g, m, v, lr=lr, **kw)
    model.splats.normalize_rotations()
    m, v = state.moments["grid/base"]
    adam_step(model.grid.base, np.asarray(grads.grid, m.dtype), m, v, lr=config.lr_grid, **kw)
    sphmip.rebuild_pyramid(model.grid)
    for name, arr in model.mlp.params.items():
        m, v = state.moments[f"mlp/{name}"]
        adam_step(arr, np.asarray(grads.mlp[name], m.dtype), m, v, lr=config.lr_mlp, **kw)


def densify_and_prune(splats: Splats, grad_accum, config: TrainConfig, scene_extent=1.0,
                      grad_count=None):
    """Simplified split / clone / prune pass.

    ``grad_accum`` holds summed positional-gradient norms; dividing by
    ``grad_count`` (visible iterations per splat) gives the mean that is
    compared against ``densify_grad_threshold``. Small high-gradient splats
    are cloned, large ones split into two children offset along ``t_u`` with
    scales divided by ``split_factor``; splats with opacity below
    ``prune_opacity`` are removed.

    Returns ``(new_splats, origin)`` where ``origin[i]`` is the index of the
    source splat that keeps its optimizer moments, or -1 for a fresh splat.
    """
    n = len(splats)
    grad_accum = np.asarray(grad_accum, np.float64)
    count = np.ones(n) if grad_count is None else np.maximum(np.asarray(grad_count, float), 1)
    avg = grad_accum / count
    high = avg > config.densify_grad_threshold
    big = splats.scale.max(axis=1) > config.percent_dense * scene_extent
    room = max(config.max_splats - n, 0)
    clone = np.flatnonzero(high & ~big)[:room]
    split = np.flatnonzero(high & big)[:max(room - len(clone), 0)]

    parts = [splats]
    origin = [np.arange(n)]
    if len(clone):
        parts.append(splats.select(clone))
        origin.append(np.full(len(clone), -1))
    if len(split):
        t_u = splats.frames()[0][split]
        offset = (splats.scale[split, :1] * t_u).astype(splats.dtype)
        shrink = splats.dtype.type(math.log(config.split_factor))
        for sign in (1, -1):
            child = splats.select(split)
            child.center += sign * offset
            child.log_scale -= shrink
            parts.append(child)
            origin.append(np.full(len(split), -1))
    out = Splats.concat(parts)
    origin = np.concatenate(origin)
    drop = np.zeros(len(out), bool)
    drop[split] = True  # parents replaced by their two children
    drop |= out.opacity < config.prune_opacity
    keep = np.flatnonzero(~drop)
    return out.select(keep), origin[keep]


def reset_opacity(splats: Splats, ceiling=0.01):
    """Clamp every opacity to at most ``ceiling``."""
    alpha = np.minimum(splats.opacity, ceiling)
    splats.opacity_raw[:] = logit(np.asarray(alpha, np.float64)).astype(splats.dtype)


@dataclass
class TrainResult:
    model: Model
    optimizer: AdamState
    log: list[str]
    iterations: int
    seconds: float = 0.0


def _scene_extent(dataset: Dataset, config: TrainConfig):
    lo, hi = np.asarray(config.init_box[:3]), np.asarray(config.init_box[3:])
    return float(np.max(hi - lo))


def init_model(dataset: Dataset, config: TrainConfig) -> Model:
    mc = config.model
    splats = init_splats(dataset, config.init_count, config.seed, config.init_box,
                         config.k_init, mc.feature_dim, config.dtype)
    return Model.create(splats, mc, seed=config.seed, dtype=config.dtype)


def _dump_diagnostics(directory, iteration, model, terms, frame_name):
    from .io import write_sections

    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"nonfinite_{iteration:06d}.bin")
    sections = {f"splats/{k}": getattr(model.splats, k) for k in SPLAT_FIELDS}
    sections["grid/base"] = model.grid.base
    sections.update({f"mlp/{k}": v for k, v in model.mlp.params.items()})
    sections["losses"] = np.array([terms.total, terms.rgb, terms.distortion, terms.normal],
                                  np.float64)
    write_sections(path, sections)
    with open(os.path.join(directory, f"nonfinite_{iteration:06d}.txt"), "w") as f:
        f.write(f"iteration {iteration}, frame {frame_name}\n{terms}\n")
    return path


def train(dataset: Dataset, config: TrainConfig, model: Model = None, out_dir=None,
          log_file=None, checkpoint_path=None, progress=None) -> TrainResult:
    """Optimize splats, grid and MLP against the frames of ``dataset``.

    Frames are visited in a seeded random order, reshuffled every epoch. The
    geometric terms are switched on after ``geometry_from`` iterations. A log
    line is emitted every ``log_interval`` iterations (and after the last).
    """
    from .io import save_checkpoint

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    start = time.perf_counter()
    model = model if model is not None else init_model(dataset, config)
    state = AdamState.for_model(model)
    rng = np.random.default_rng(config.seed)
    extent = _scene_extent(dataset, config)
    accum = np.zeros(len(model.splats))
    seen = np.zeros(len(model.splats))
    log = [LOG_HEADER]
    if log_file is not None:
        log_file.write(LOG_HEADER + "\n")
    order = []
    dtype = config.dtype
    targets = [fr.image.astype(dtype) for fr in dataset.frames]
    photometric = dataclasses.replace(config, lambda_d=0.0, lambda_n=0.0)

    for it in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(dataset)))
        k = int(order.pop())
        frame = dataset.frames[k]
        active = config if it > config.geometry_from else photometric
        res, grads = forward_backward(model, frame.camera, targets[k], active)
        terms = res.losses
        if not np.isfinite(terms.total):
            path = _dump_diagnostics(out_dir or ".", it, model, terms, frame.name)
            raise NonFiniteLossError(f"non-finite loss at iteration {it}; diagnostics in {path}")

        g_pos = np.linalg.norm(np.asarray(grads.splats["center"], np.float64), axis=1)
        visible = res.worklist.visible
        accum += np.where(visible, g_pos, 0.0)
        seen += visible

        apply_gradients(model, grads, state, config, it - 1)

        if config.densify_from <= it < config.densify_until and it % config.densify_interval == 0:
            splats, origin = densify_and_prune(model.splats, accum, config, extent, seen)
            model.splats = splats
            state.remap_splats(origin)
            accum = np.zeros(len(splats))
            seen = np.zeros(len(splats))
        if (config.opacity_reset_interval and it % config.opacity_reset_interval == 0
                and config.densify_from <= it < config.densify_until):
            reset_opacity(model.splats)
            m, v = state.moments["splats/opacity_raw"]
            m[:] = 0
            v[:] = 0

        if it % config.log_interval == 0 or it == config.iterations:
            p = psnr(res.shaded.srgb, targets[k])
            line = (f"{it},{terms.total:.8g},{terms.rgb:.8g},{terms.distortion:.8g},"
                    f"{terms.normal:.8g},{p:.4f},{len(model.splats)}")
            log.append(line)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
            if progress is not None:
                progress(it, terms, p, model)
        if checkpoint_path and config.checkpoint_interval and it % config.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, model, config, state, it)

    return TrainResult(model, state, log, config.iterations, time.perf_counter() - start)
