"""Learnable latitude-longitude feature pyramid queried by direction and roughness.

Only the base level is trainable; coarser levels are 2x2 mean pools of the
level above. Queries sample the two levels bracketing ``rho * (N - 1)``
bilinearly at their native resolution and blend linearly between them.

Texel addressing, for a level of shape (h, w)::

    x = (phi + pi) / (2 pi) * w - 0.5     (wraps around in phi)
    y = theta / pi * h - 0.5              (clamped at the poles)
"""

from __future__ import annotations

import struct

import numpy as np
import scipy.sparse as sp

MAGIC = b"RGSM"


class SphMipGrid:
    def __init__(self, base: np.ndarray, levels: int):
        base = np.ascontiguousarray(base)
        h, w, _ = base.shape
        if levels < 1:
            raise ValueError("need at least one level")
        if h % (1 << (levels - 1)) or w % (1 << (levels - 1)):
            raise ValueError(f"base {h}x{w} is not divisible by 2^{levels - 1}")
        self.base = base
        self.n_levels = levels
        self.levels: list[np.ndarray] = []
        rebuild_pyramid(self)

    @classmethod
    def random(cls, height=512, width=1024, channels=16, levels=9, seed=0,
               scale=1e-2, dtype=np.float32):
        rng = np.random.default_rng(seed)
        base = rng.uniform(-scale, scale, (height, width, channels)).astype(dtype)
        return cls(base, levels)

    @classmethod
    def constant(cls, value, height, width, channels, levels, dtype=np.float64):
        return cls(np.full((height, width, channels), value, dtype), levels)

    @property
    def channels(self):
        return self.base.shape[2]

    def copy(self) -> "SphMipGrid":
        return SphMipGrid(self.base.copy(), self.n_levels)


def rebuild_pyramid(grid: SphMipGrid) -> SphMipGrid:
    """Recompute levels 1..N-1 from the base by repeated 2x2 averaging."""
    levels = [grid.base]
    for _ in range(1, grid.n_levels):
        prev = levels[-1]
        h, w, c = prev.shape
        levels.append(prev.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3)))
    grid.levels = levels
    return grid


def dir_to_spherical(w):
    """(theta, phi) of direction(s) ``w``; theta in [0, pi], phi in [-pi, pi]."""
    w = np.asarray(w, dtype=np.float64)
    r = np.linalg.norm(w, axis=-1)
    if np.any(r == 0):
        raise ValueError("direction must be nonzero")
    theta = np.arccos(np.clip(w[..., 2] / r, -1.0, 1.0))
    phi = np.arctan2(w[..., 1], w[..., 0])
    return theta, phi


def _bilinear_taps(theta, phi, h, w):
    """Four (row, col, weight) taps per sample plus d(weights)/d(x, y) terms."""
    x = (phi + np.pi) / (2 * np.pi) * w - 0.5
    y = theta / np.pi * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    c0 = np.mod(x0, w)
    c1 = np.mod(x0 + 1, w)
    r0 = np.clip(y0, 0, h - 1)
    r1 = np.clip(y0 + 1, 0, h - 1)
    return (r0, r1, c0, c1), fx, fy


def _sample_level(level, theta, phi):
    h, w, _ = level.shape
    (r0, r1, c0, c1), fx, fy = _bilinear_taps(theta, phi, h, w)
    fx = fx[:, None]
    fy = fy[:, None]
    top = level[r0, c0] * (1 - fx) + level[r0, c1] * fx
    bot = level[r1, c0] * (1 - fx) + level[r1, c1] * fx
    return top * (1 - fy) + bot * fy


def _level_coords(grid, rho):
    rho = np.clip(rho, 0.0, 1.0)
    ell = rho * (grid.n_levels - 1)
    l0 = np.floor(ell).astype(np.int64)
    l0 = np.minimum(l0, grid.n_levels - 1)
    l1 = np.minimum(l0 + 1, grid.n_levels - 1)
    return ell - l0, l0, l1


def query(grid: SphMipGrid, w_r, rho) -> np.ndarray:
    """Directional feature for reflection direction(s) ``w_r`` and roughness ``rho``.

    Accepts a single direction (3,) with scalar ``rho`` or batches (P, 3), (P,).
    """
    w_r = np.asarray(w_r)
    single = w_r.ndim == 1
    w_r = np.atleast_2d(w_r)
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), w_r.shape[:1])
    assert np.all((rho >= -1e-9) & (rho <= 1 + 1e-9)), "roughness outside [0, 1]"
    theta, phi = dir_to_spherical(w_r)
    frac, l0, l1 = _level_coords(grid, rho)
    out = np.zeros((w_r.shape[0], grid.channels), dtype=grid.base.dtype)
    for k in range(grid.n_levels):
        lo = l0 == k
        hi = (l1 == k) & (frac > 0)
        sel = lo | hi
        if not np.any(sel):
            continue
        weight = np.where(lo[sel], 1 - frac[sel], 0.0) + np.where(hi[sel], frac[sel], 0.0)
        out[sel] += weight[:, None] * _sample_level(grid.levels[k], theta[sel], phi[sel])
    return out[0] if single else out


def _spherical_jacobian(w):
    """d(theta)/dw and d(phi)/dw; both zero on the poles."""
    x, y, z = w[:, 0], w[:, 1], w[:, 2]
    r2 = x * x + y * y + z * z
    rxy2 = x * x + y * y
    rxy = np.sqrt(rxy2)
    pole = rxy < 1e-12
    safe_rxy = np.where(pole, 1.0, rxy)
    safe_rxy2 = np.where(pole, 1.0, rxy2)
    dtheta = np.stack([x * z / (r2 * safe_rxy), y * z / (r2 * safe_rxy), -rxy / r2], axis=1)
    dphi = np.stack([-y / safe_rxy2, x / safe_rxy2, np.zeros_like(x)], axis=1)
    dtheta[pole] = 0.0
    dphi[pole] = 0.0
    return dtheta, dphi


def query_backward(grid: SphMipGrid, w_r, rho, upstream):
    """Gradients of ``<upstream, query(grid, w_r, rho)>``.

    Returns ``(grad_base, grad_w_r, grad_rho)`` where ``grad_base`` has the
    shape of ``grid.base``.
    """
    w_r = np.atleast_2d(np.asarray(w_r))
    upstream = np.atleast_2d(np.asarray(upstream))
    n = w_r.shape[0]
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (n,))
    theta, phi = dir_to_spherical(w_r)
    frac, l0, l1 = _level_coords(grid, rho)
    dtype = grid.base.dtype
    C = grid.channels
    N = grid.n_levels

    grad_theta = np.zeros(n)
    grad_phi = np.zeros(n)
    samples = np.zeros((N, n, C), dtype) if N > 1 else None
    level_grads = []
    for k in range(N):
        level = grid.levels[k]
        h, w, _ = level.shape
        lo = l0 == k
        hi = (l1 == k) & (l1 != l0)
        sel = np.flatnonzero(lo | hi)
        if sel.size == 0:
            level_grads.append(None)
            continue
        weight = np.where(lo[sel], 1 - frac[sel], 0.0) + np.where(hi[sel], frac[sel], 0.0)
        (r0, r1, c0, c1), fx, fy = _bilinear_taps(theta[sel], phi[sel], h, w)
        g = upstream[sel] * weight[:, None]
        taps = [(r0, c0, (1 - fx) * (1 - fy)), (r0, c1, fx * (1 - fy)),
                (r1, c0, (1 - fx) * fy), (r1, c1, fx * fy)]
        rows = np.concatenate([np.arange(sel.size)] * 4)
        cols = np.concatenate([r * w + c for r, c, _ in taps])
        vals = np.concatenate([wt for _, _, wt in taps])
        scatter = sp.csr_matrix((vals, (rows, cols)), shape=(sel.size, h * w))
        level_grads.append(np.asarray(scatter.T @ g).reshape(h, w, C))

        t00, t01, t10, t11 = level[r0, c0], level[r0, c1], level[r1, c0], level[r1, c1]
        fxc, fyc = fx[:, None], fy[:, None]
        ds_dx = (1 - fyc) * (t01 - t00) + fyc * (t11 - t10)
        ds_dy = (1 - fxc) * (t10 - t00) + fxc * (t11 - t01)
        # rows clamp at the poles: the sample is constant in y there
        flat_y = (r0 == r1)[:, None]
        ds_dy = np.where(flat_y, 0.0, ds_dy)
        gx = np.sum(g * ds_dx, axis=1)
        gy = np.sum(g * ds_dy, axis=1)
        grad_phi[sel] += gx * w / (2 * np.pi)
        grad_theta[sel] += gy * h / np.pi
        if samples is not None:
            samples[k, sel] = t00 * ((1 - fxc) * (1 - fyc)) + t01 * (fxc * (1 - fyc)) \
                + t10 * ((1 - fxc) * fyc) + t11 * (fxc * fyc)

    # fold pooled-level gradients back onto the base, coarse to fine
    acc = None
    for k in range(N - 1, -1, -1):
        if acc is not None:
            h, w, _ = acc.shape
            acc = np.broadcast_to(acc[:, None, :, None, :] * 0.25, (h, 2, w, 2, C)).reshape(
                2 * h, 2 * w, C)
        g = level_grads[k]
        if g is not None:
            acc = g if acc is None else acc + g
    if acc is None:
        acc = np.zeros_like(grid.base)
    grad_base = acc.astype(dtype, copy=False)

    if N > 1:
        idx = np.arange(n)
        moving = (l1 != l0)
        ds_drho = (samples[l1, idx] - samples[l0, idx]) * (N - 1)
        grad_rho = np.where(moving, np.sum(upstream * ds_drho, axis=1), 0.0)
    else:
        grad_rho = np.zeros(n)

    dtheta, dphi = _spherical_jacobian(np.asarray(w_r, dtype=np.float64))
    grad_w = grad_theta[:, None] * dtheta + grad_phi[:, None] * dphi
    return grad_base, grad_w, grad_rho


def save_grid(path, grid: SphMipGrid):
    h, w, c = grid.base.shape
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(grid.base, dtype="<f4").tobytes())


def load_grid(path, levels) -> SphMipGrid:
    with open(path, "rb") as f:
        header = f.read(16)
        if header[:4] != MAGIC:
            raise ValueError(f"{path} is not a grid file")
        h, w, c = struct.unpack("<III", header[4:])
        base = np.frombuffer(f.read(4 * h * w * c), dtype="<f4").reshape(h, w, c)
    return SphMipGrid(base.astype(np.float32), levels)
