"""Photometric and geometric training losses, each paired with its gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .metrics import ssim_grad
from .rasterizer import GBuffer, GBufferGrads, PerRayHits
from .scene import Camera


def loss_rgb(pred, gt, lam=0.2, with_grad=False):
    """(1 - lam) * L1 + lam * (1 - SSIM) / 2."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred.astype(np.float64) - gt
    l1 = float(np.mean(np.abs(diff)))
    if lam > 0:
        s, g_ssim = ssim_grad(pred, gt)
    else:
        s, g_ssim = 1.0, 0.0
    loss = (1 - lam) * l1 + lam * (1 - s) / 2
    if not with_grad:
        return loss
    grad = (1 - lam) * np.sign(diff) / diff.size - lam / 2 * g_ssim
    return loss, grad


def pair_distortion_bruteforce(weights, depths):
    """Quadratic reference: sum over ordered pairs of w_i w_j |z_i - z_j|."""
    w = np.asarray(weights, dtype=np.float64)
    z = np.asarray(depths, dtype=np.float64)
    return float(np.sum(w[:, None] * w[None, :] * np.abs(z[:, None] - z[None, :])))


def ray_distortion(weights, depths, valid=None):
    """Per-ray pair distortion via prefix sums.

    ``weights`` and ``depths`` are (..., L); entries outside ``valid`` are
    ignored. Hits are sorted by depth first, so any traversal order works.
    Returns (loss per ray, dL/dw, dL/dz).
    """
    w = np.asarray(weights, dtype=np.float64)
    z = np.asarray(depths, dtype=np.float64)
    if valid is None:
        valid = np.ones(w.shape, bool)
    w = np.where(valid, w, 0.0)
    key = np.where(valid, z, np.inf)
    order = np.argsort(key, axis=-1, kind="stable")
    ws = np.take_along_axis(w, order, -1)
    zs = np.take_along_axis(np.where(valid, z, 0.0), order, -1)
    A = np.cumsum(ws, axis=-1)
    A_prev = A - ws
    A_next = A[..., -1:] - A
    # D_i = sum_{j<i} w_j (z_i - z_j) and U_i = sum_{j>i} w_j (z_j - z_i), accumulated
    # from non-negative increments so single-depth rays give exactly zero
    dz = np.diff(zs, axis=-1)
    lead = np.zeros(zs.shape[:-1] + (1,))
    below = np.concatenate([lead, np.cumsum(A_prev[..., 1:] * dz, axis=-1)], axis=-1)
    above_inc = (A_next[..., :-1] * dz)[..., ::-1]
    above = np.concatenate([np.cumsum(above_inc, axis=-1)[..., ::-1], lead], axis=-1)
    loss = 2.0 * np.sum(ws * below, axis=-1)
    gws = 2.0 * (below + above)
    gzs = 2.0 * ws * (A_prev - A_next)
    gw = np.zeros_like(w)
    gz = np.zeros_like(w)
    np.put_along_axis(gw, order, gws, -1)
    np.put_along_axis(gz, order, gzs, -1)
    return loss, np.where(valid, gw, 0.0), np.where(valid, gz, 0.0)


@njit(cache=True)
def _distortion_kernel(count, weight, depth, gw, gz):
    """Per-ray running-sum distortion over the first ``count[p]`` hits of each row.

    With hits sorted by depth, ``D_i = sum_{j<i} w_j (z_i - z_j)`` follows
    ``D_i = D_{i-1} + A_{i-1} (z_i - z_{i-1})`` (A: prefix weight sum), the
    same quantity as ``z_i A_{i-1} - Z_{i-1}`` but built from non-negative
    terms only, so rays at a single depth give exactly zero.
    """
    P = weight.shape[0]
    L = max(weight.shape[1], 1)
    loss = np.zeros(P)
    order = np.empty(L, np.int64)
    below = np.empty(L)
    a_prev = np.empty(L)
    for p in range(P):
        n = count[p]
        if n < 2:
            continue
        # stable insertion sort by depth; center-sorted hits are nearly in order
        for i in range(n):
            order[i] = i
        for i in range(1, n):
            key = order[i]
            zk = depth[p, key]
            j = i - 1
            while j >= 0 and depth[p, order[j]] > zk:
                order[j + 1] = order[j]
                j -= 1
            order[j + 1] = key
        a_tot = 0.0
        for i in range(n):
            a_tot += weight[p, i]
        A = 0.0
        D = 0.0
        z_last = depth[p, order[0]]
        acc = 0.0
        for q in range(n):
            i = order[q]
            w = float(weight[p, i])
            z = float(depth[p, i])
            D += A * (z - z_last)
            below[q] = D
            a_prev[q] = A
            acc += w * D
            A += w
            z_last = z
        # mirror recurrence from the far end: U_i = sum_{j>i} w_j (z_j - z_i)
        B = 0.0
        U = 0.0
        z_next = depth[p, order[n - 1]]
        for q in range(n - 1, -1, -1):
            i = order[q]
            w = float(weight[p, i])
            z = float(depth[p, i])
            U += B * (z_next - z)
            gw[p, i] = 2.0 * (below[q] + U)
            gz[p, i] = 2.0 * w * (a_prev[q] - (a_tot - a_prev[q] - w))
            B += w
            z_next = z
        loss[p] = 2.0 * acc
    return loss


def loss_depth_distortion(hits: PerRayHits, with_grad=False):
    """Mean over rays with at least one hit of the pairwise depth distortion."""
    shape = hits.weight.shape
    P, L = int(np.prod(shape[:-1])), shape[-1]
    count = np.ascontiguousarray(hits.count.reshape(P), dtype=np.int64)
    weight = np.ascontiguousarray(hits.weight.reshape(P, L), dtype=np.float64)
    depth = np.ascontiguousarray(hits.depth.reshape(P, L), dtype=np.float64)
    gw = np.zeros((P, L))
    gz = np.zeros((P, L))
    per_ray = _distortion_kernel(count, weight, depth, gw, gz)
    n = int(np.count_nonzero(count))
    loss = float(per_ray.sum() / n) if n else 0.0
    if not with_grad:
        return loss
    scale = 1.0 / n if n else 0.0
    return loss, (gw * scale).reshape(shape), (gz * scale).reshape(shape)


def _pixel_rays(camera: Camera):
    xs = (np.arange(camera.width) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(camera.height) + 0.5 - camera.cy) / camera.fy
    return np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], 1.0), axis=-1)


def depth_to_normal(depth, camera: Camera, alpha=None, coverage_eps=1e-4, with_cache=False):
    """Camera-space normals from central differences of the back-projected depth.

    With ``alpha`` the depth is treated as alpha-weighted and divided by it,
    and stencils touching pixels with alpha <= ``coverage_eps`` are masked.
    Normals face the camera (n . p < 0). Returns (normals (H, W, 3), mask).
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    normals = np.zeros((H, W, 3))
    mask = np.zeros((H, W), bool)
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=np.float64)
        ok = alpha > coverage_eps
        z = np.where(ok, depth / np.where(ok, alpha, 1.0), 0.0)
    else:
        ok = np.ones((H, W), bool)
        z = depth
    rays = _pixel_rays(camera)
    p = z[..., None] * rays
    cache = dict(z=z, rays=rays, alpha=alpha, depth=depth, ok=ok)
    if H < 3 or W < 3:
        return (normals, mask, cache) if with_cache else (normals, mask)
    du = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    dv = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    m = np.cross(du, dv)
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    center = p[1:-1, 1:-1]
    sign = np.where(np.sum(m * center, axis=-1, keepdims=True) > 0, -1.0, 1.0)
    inner = ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1]
    inner &= norm[..., 0] > 1e-20
    safe = np.where(norm > 1e-20, norm, 1.0)
    normals[1:-1, 1:-1] = np.where(inner[..., None], sign * m / safe, 0.0)
    mask[1:-1, 1:-1] = inner
    cache.update(du=du, dv=dv, m=m, norm=safe, sign=sign)
    return (normals, mask, cache) if with_cache else (normals, mask)


def depth_to_normal_backward(cache, normals, mask, g_normals):
    """Gradients w.r.t. (depth, alpha) given dL/d(normals)."""
    H, W = cache["z"].shape
    g_depth = np.zeros((H, W))
    g_alpha = np.zeros((H, W))
    if "m" not in cache:
        return g_depth, g_alpha
    inner = mask[1:-1, 1:-1][..., None]
    n_hat = normals[1:-1, 1:-1]
    g = np.where(inner, g_normals[1:-1, 1:-1], 0.0)
    g_m = cache["sign"] * (g - n_hat * np.sum(n_hat * g, axis=-1, keepdims=True)) / cache["norm"]
    g_du = np.cross(cache["dv"], g_m)
    g_dv = np.cross(g_m, cache["du"])
    g_p = np.zeros((H, W, 3))
    g_p[1:-1, 2:] += 0.5 * g_du
    g_p[1:-1, :-2] -= 0.5 * g_du
    g_p[2:, 1:-1] += 0.5 * g_dv
    g_p[:-2, 1:-1] -= 0.5 * g_dv
    g_z = np.sum(g_p * cache["rays"], axis=-1)
    if cache["alpha"] is None:
        return g_z, g_alpha
    ok = cache["ok"]
    a = np.where(ok, cache["alpha"], 1.0)
    g_depth = np.where(ok, g_z / a, 0.0)
    g_alpha = np.where(ok, -g_z * cache["depth"] / (a * a), 0.0)
    return g_depth, g_alpha


@njit(cache=True)
def _normal_kernel(count, splat, weight, splat_normals, n_world, mask, scale,
                   g_w, g_splat_n, g_nw):
    total = 0.0
    for p in range(count.shape[0]):
        if not mask[p]:
            continue
        for k in range(count[p]):
            j = splat[p, k]
            w = weight[p, k]
            dot = 0.0
            for c in range(3):
                dot += splat_normals[j, c] * n_world[p, c]
            total += w * (1.0 - dot)
            g_w[p, k] = (1.0 - dot) * scale
            for c in range(3):
                g_splat_n[j, c] -= w * n_world[p, c] * scale
                g_nw[p, c] -= w * splat_normals[j, c] * scale
    return total * scale


def loss_normal_consistency(hits: PerRayHits, depth, camera: Camera, alpha=None,
                            coverage_eps=1e-4, with_grad=False):
    """Mean over masked pixels of sum_i w_i (1 - n_i . N_hat).

    ``n_i`` are the camera-facing world-space splat normals carried by
    ``hits``; the depth-derived normal is rotated to world space before the
    comparison. With gradients, returns ``(loss, dL/dw (H, W, L),
    dL/d splat normal (N, 3), dL/d depth, dL/d alpha)``.
    """
    n_cam, mask, cache = depth_to_normal(depth, camera, alpha, coverage_eps, with_cache=True)
    n_world = n_cam @ camera.R
    H, W = mask.shape
    L = hits.weight.shape[-1]
    P = H * W
    n = int(mask.sum())
    scale = 1.0 / n if n else 0.0
    g_w = np.zeros((P, L))
    g_sn = np.zeros(hits.splat_normals.shape)
    g_nw = np.zeros((P, 3))
    loss = _normal_kernel(
        np.ascontiguousarray(hits.count.reshape(P), dtype=np.int64),
        np.ascontiguousarray(hits.splat.reshape(P, L), dtype=np.int64),
        np.ascontiguousarray(hits.weight.reshape(P, L), dtype=np.float64),
        np.ascontiguousarray(hits.splat_normals, dtype=np.float64),
        np.ascontiguousarray(n_world.reshape(P, 3)),
        np.ascontiguousarray(mask.reshape(P)), scale, g_w, g_sn, g_nw,
    )
    if not with_grad:
        return loss
    g_ncam = g_nw.reshape(H, W, 3) @ camera.R.T
    g_depth, g_alpha = depth_to_normal_backward(cache, n_cam, mask, g_ncam)
    return loss, g_w.reshape(H, W, L), g_sn, g_depth, g_alpha


def total_loss(l_rgb, l_d, l_n, lambda_d=100.0, lambda_n=0.05):
    return l_rgb + lambda_d * l_d + lambda_n * l_n


@dataclass
class LossTerms:
    total: float
    rgb: float
    distortion: float
    normal: float


def frame_losses(srgb, gt, gbuffer: GBuffer, camera: Camera, config, coverage_eps=1e-4):
    """All loss terms for one rendered frame and their upstream gradients.

    Returns ``(LossTerms, grad_srgb, GBufferGrads)``; the G-buffer gradients
    cover only the geometric terms (the photometric term flows through
    ``grad_srgb``).
    """
    l_rgb, g_srgb = loss_rgb(srgb, gt, config.lambda_ssim, with_grad=True)
    hits = gbuffer.hits
    grads = GBufferGrads()
    dtype = gbuffer.depth.dtype
    # zero-weighted terms are still evaluated for logging, just not differentiated
    if config.lambda_d > 0:
        l_d, gw_d, gz_d = loss_depth_distortion(hits, with_grad=True)
        grads.hit_weight = (config.lambda_d * gw_d).astype(dtype)
        grads.hit_depth = (config.lambda_d * gz_d).astype(dtype)
    else:
        l_d = loss_depth_distortion(hits)
    if config.lambda_n > 0:
        l_n, gw_n, g_sn, g_depth, g_alpha = loss_normal_consistency(
            hits, gbuffer.depth, camera, gbuffer.alpha, coverage_eps, with_grad=True)
        lam = config.lambda_n
        grads = grads.add(GBufferGrads(
            hit_weight=(lam * gw_n).astype(dtype),
            splat_normal=(lam * g_sn).astype(dtype),
            depth=(lam * g_depth).astype(dtype),
            alpha=(lam * g_alpha).astype(dtype),
        ))
    else:
        l_n = loss_normal_consistency(hits, gbuffer.depth, camera, gbuffer.alpha, coverage_eps)
    total = total_loss(l_rgb, l_d, l_n, config.lambda_d, config.lambda_n)
    return LossTerms(total, l_rgb, l_d, l_n), g_srgb.astype(dtype), grads
