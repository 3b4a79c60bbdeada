"""Image and normal-map quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


_KERNEL = _window()


def _filter_valid(x, k=_KERNEL):
    """Separable 'valid' correlation over the first two axes."""
    y = sliding_window_view(x, k.size, axis=0) @ k
    return sliding_window_view(y, k.size, axis=1) @ k


def _filter_adjoint(g, k=_KERNEL):
    pad = k.size - 1
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (g.ndim - 2)
    return _filter_valid(np.pad(g, widths), k[::-1])


def _ssim_terms(a, b):
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    e_aa = _filter_valid(a * a)
    e_bb = _filter_valid(b * b)
    e_ab = _filter_valid(a * b)
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    B2 = (e_aa - mu_a ** 2) + (e_bb - mu_b ** 2) + SSIM_C2
    return mu_a, mu_b, A1, A2, B1, B2


def ssim(a, b):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1.

    Images are (H, W) or (H, W, C); the SSIM map is computed per channel over
    the valid window region and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image too small for SSIM: {a.shape[:2]}")
    _, _, A1, A2, B1, B2 = _ssim_terms(a, b)
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_grad(a, b):
    """(ssim(a, b), d ssim / d a)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    S = A1 * A2 / (B1 * B2)
    scale = 1.0 / S.size
    denom = B1 * B2
    # partials w.r.t. the filtered moments mu_a, E[a^2], E[ab]
    g_mu = scale * ((2 * mu_b * A2 - 2 * mu_b * A1) / denom - S * (2 * mu_a / B1 - 2 * mu_a / B2))
    g_eaa = scale * (-S / B2)
    g_eab = scale * (2 * A1 / denom)
    grad = _filter_adjoint(g_mu) + 2 * a * _filter_adjoint(g_eaa) + b * _filter_adjoint(g_eab)
    return float(np.mean(S)), grad


def psnr(a, b, quantize=False):
    """PSNR in dB for images in [0, 1]; ``inf`` when they are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if quantize:
        a = quantize_8bit(a)
        b = quantize_8bit(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def quantize_8bit(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def mae_degrees(pred_normals, gt_normals, mask):
    """Mean angle in degrees between two normal maps over ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    dots = np.sum(np.asarray(pred_normals)[mask] * np.asarray(gt_normals)[mask], axis=-1)
    return float(np.degrees(np.mean(np.arccos(np.clip(dots, -1.0, 1.0)))))


@dataclass
class EvalReport:
    frames: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    mae: list[float | None] = field(default_factory=list)

    def add(self, name, psnr_db, ssim_val, mae_deg=None):
        self.frames.append(name)
        self.psnr.append(psnr_db)
        self.ssim.append(ssim_val)
        self.mae.append(mae_deg)

    def mean(self):
        maes = [m for m in self.mae if m is not None]
        return {
            "psnr": float(np.mean(self.psnr)) if self.psnr else math.nan,
            "ssim": float(np.mean(self.ssim)) if self.ssim else math.nan,
            "mae": float(np.mean(maes)) if maes else None,
        }

    def to_csv(self) -> str:
        lines = ["frame,psnr,ssim,mae"]
        for name, p, s, m in zip(self.frames, self.psnr, self.ssim, self.mae):
            lines.append(f"{name},{p:.6f},{s:.6f},{'' if m is None else f'{m:.6f}'}")
        mean = self.mean()
        m = mean["mae"]
        lines.append(f"mean,{mean['psnr']:.6f},{mean['ssim']:.6f},{'' if m is None else f'{m:.6f}'}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"frames": len(self.frames), **self.mean()}
