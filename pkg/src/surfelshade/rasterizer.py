"""Tile-based differentiable surfel rasterizer producing a G-buffer.

Forward: every tile walks its depth-sorted splat list once per pixel and
alpha-blends the packed attribute vector ``[diffuse, feature, roughness,
facing normal]`` plus hit depth. Each pixel records the list entries it
actually blended (``per_ray_hits``); the backward pass replays exactly those
entries, so forward and backward always agree on traversal order.

Gradients are accumulated per work-list entry (each tile is owned by one
thread) and reduced into splats in a fixed entry order, which makes the
result independent of the number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .config import RenderSettings
from .primitives import intersect
from .scene import Camera, Splats, quat_to_matrix, quat_to_matrix_backward, sigmoid

# attribute layout of the packed per-splat vector
DIFFUSE = slice(0, 3)


def _layout(feature_dim):
    f0 = 3
    r = f0 + feature_dim
    return slice(f0, r), r, slice(r + 1, r + 4), r + 4


@dataclass
class ProjectedSplats:
    """Per-camera precomputation: camera-space frames and packed attributes."""

    center: np.ndarray  # (N, 3) camera space
    t_u: np.ndarray
    t_v: np.ndarray
    normal: np.ndarray  # camera space, unflipped
    scale: np.ndarray  # (N, 2)
    opacity: np.ndarray  # (N,)
    attr: np.ndarray  # (N, n_attr)
    facing_sign: np.ndarray  # (N,) +1 / -1
    rot_world: np.ndarray  # (N, 3, 3)


@dataclass
class SortedWorkList:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (n_tiles + 1,) into ``entries``
    entries: np.ndarray  # splat index per list entry, int64
    entry_depth: np.ndarray
    bbox: np.ndarray  # (N, 4) pixel-space x0, y0, x1, y1 (inf = whole screen)
    visible: np.ndarray  # (N,) bool
    proj: ProjectedSplats
    camera: Camera
    n_splats: int

    def tile_list(self, tile):
        return self.entries[self.offsets[tile]:self.offsets[tile + 1]]

    @property
    def max_list(self):
        if len(self.offsets) < 2:
            return 0
        return int(np.max(np.diff(self.offsets)))


@dataclass
class PerRayHits:
    """Hits actually blended at each pixel, in blending order."""

    count: np.ndarray  # (H, W) int
    entry: np.ndarray  # (H, W, L) work-list entry, -1 padded
    splat: np.ndarray  # (H, W, L) splat index, -1 padded
    weight: np.ndarray  # (H, W, L)
    depth: np.ndarray  # (H, W, L) view-space z of the hit
    splat_normals: np.ndarray  # (N, 3) world-space camera-facing normal per splat

    @property
    def valid(self):
        return self.splat >= 0

    @property
    def normal(self):
        """(H, W, L, 3) camera-facing normal of each hit, zero on padding."""
        n = self.splat_normals[np.maximum(self.splat, 0)]
        return np.where(self.valid[..., None], n, 0.0)


@dataclass
class GBuffer:
    diffuse: np.ndarray  # (H, W, 3)
    feature: np.ndarray  # (H, W, D)
    roughness: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3) world space, unit where covered
    depth: np.ndarray  # (H, W) weighted sum of hit depths
    alpha: np.ndarray  # (H, W)
    hits: PerRayHits | None = None
    normal_raw: np.ndarray | None = None  # blended normal before renormalization

    @property
    def shape(self):
        return self.alpha.shape

    def planes(self):
        return {
            "diffuse": self.diffuse,
            "feature": self.feature,
            "roughness": self.roughness[..., None],
            "normal": self.normal,
            "depth": self.depth[..., None],
            "alpha": self.alpha[..., None],
        }


@dataclass
class GBufferGrads:
    """Upstream gradients for every G-buffer channel (None means zero)."""

    diffuse: np.ndarray | None = None
    feature: np.ndarray | None = None
    roughness: np.ndarray | None = None
    normal: np.ndarray | None = None
    depth: np.ndarray | None = None
    alpha: np.ndarray | None = None
    hit_weight: np.ndarray | None = None
    hit_depth: np.ndarray | None = None
    hit_normal: np.ndarray | None = None  # (H, W, L, 3) per-hit normal
    splat_normal: np.ndarray | None = None  # (N, 3) per-splat facing normal

    def add(self, other: "GBufferGrads") -> "GBufferGrads":
        out = GBufferGrads()
        for name in out.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            setattr(out, name, b if a is None else (a if b is None else a + b))
        return out


# ---------------------------------------------------------------------------
# projection / binning


def project_splats(splats: Splats, camera: Camera, dtype=None) -> ProjectedSplats:
    dtype = dtype or splats.dtype
    Rc = camera.R.astype(dtype)
    tc = camera.t.astype(dtype)
    R = quat_to_matrix(splats.rotation)
    tu_w, tv_w, n_w = R[..., 0], R[..., 1], R[..., 2]
    center = splats.center @ Rc.T + tc
    normal = n_w @ Rc.T
    sign = np.where(np.sum(normal * center, axis=1) > 0, -1.0, 1.0).astype(dtype)
    attr = np.concatenate(
        [
            splats.diffuse,
            splats.feature,
            splats.roughness[:, None],
            n_w * sign[:, None],
        ],
        axis=1,
    )
    return ProjectedSplats(
        center=np.ascontiguousarray(center, dtype),
        t_u=np.ascontiguousarray(tu_w @ Rc.T, dtype),
        t_v=np.ascontiguousarray(tv_w @ Rc.T, dtype),
        normal=np.ascontiguousarray(normal, dtype),
        scale=np.ascontiguousarray(splats.scale, dtype),
        opacity=np.ascontiguousarray(splats.opacity, dtype),
        attr=np.ascontiguousarray(attr, dtype),
        facing_sign=sign,
        rot_world=R,
    )


def support_radius(opacity, alpha_skip):
    """Radius (in sigma units) outside which a hit is always skipped; inf if never."""
    opacity = np.asarray(opacity, dtype=np.float64)
    if alpha_skip <= 0:
        return np.full(opacity.shape, np.inf)
    ratio = np.maximum(opacity / alpha_skip, 1.0)
    return np.maximum(3.0, np.sqrt(2.0 * np.log(ratio)))


def cull_and_sort(splats: Splats, camera: Camera, tile_size=16, settings: RenderSettings = None):
    """Cull splats behind the near plane, bin them to tiles and depth-sort each tile."""
    settings = settings or RenderSettings(tile_size=tile_size)
    proj = project_splats(splats, camera)
    n = len(splats)
    W, H = camera.width, camera.height
    tiles_x = -(-W // tile_size)
    tiles_y = -(-H // tile_size)

    cc = proj.center.astype(np.float64)
    depth = cc[:, 2]
    visible = depth > settings.z_near
    radius = support_radius(proj.opacity, settings.alpha_skip)
    if settings.alpha_skip > 0:
        visible &= proj.opacity >= settings.alpha_skip

    bbox = np.full((n, 4), np.nan)
    full = ~np.isfinite(radius)
    r = np.where(full, 0.0, radius)
    du = (r * proj.scale[:, 0].astype(np.float64))[:, None] * proj.t_u
    dv = (r * proj.scale[:, 1].astype(np.float64))[:, None] * proj.t_v
    corners = np.stack([cc + du + dv, cc + du - dv, cc - du + dv, cc - du - dv], axis=1)
    cz = corners[..., 2]
    full |= np.any(cz <= settings.z_near, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * corners[..., 0] / cz + camera.cx
        py = camera.fy * corners[..., 1] / cz + camera.cy
    bbox[:, 0], bbox[:, 1] = px.min(axis=1), py.min(axis=1)
    bbox[:, 2], bbox[:, 3] = px.max(axis=1), py.max(axis=1)
    bbox[full] = (-np.inf, -np.inf, np.inf, np.inf)

    on_screen = visible & ~((bbox[:, 2] < 0) | (bbox[:, 3] < 0) | (bbox[:, 0] >= W)
                            | (bbox[:, 1] >= H))
    with np.errstate(invalid="ignore"):
        tx0 = np.floor(np.maximum(bbox[:, 0], 0.0) / tile_size)
        ty0 = np.floor(np.maximum(bbox[:, 1], 0.0) / tile_size)
        tx1 = np.floor(np.minimum(bbox[:, 2], W - 1e-9) / tile_size)
        ty1 = np.floor(np.minimum(bbox[:, 3], H - 1e-9) / tile_size)
    rect = np.zeros((n, 4), np.int64)
    rect[on_screen, 0] = np.clip(tx0[on_screen], 0, tiles_x - 1)
    rect[on_screen, 1] = np.clip(ty0[on_screen], 0, tiles_y - 1)
    rect[on_screen, 2] = np.clip(tx1[on_screen], 0, tiles_x - 1)
    rect[on_screen, 3] = np.clip(ty1[on_screen], 0, tiles_y - 1)
    tile_ids, splat_ids = _bin_tiles(rect, on_screen, tiles_x)
    order = np.lexsort((splat_ids, depth[splat_ids], tile_ids))
    tile_ids, splat_ids = tile_ids[order], splat_ids[order]
    counts = np.bincount(tile_ids, minlength=tiles_x * tiles_y)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return SortedWorkList(
        tile_size=tile_size,
        tiles_x=tiles_x,
        tiles_y=tiles_y,
        offsets=offsets,
        entries=splat_ids.astype(np.int64),
        entry_depth=depth[splat_ids],
        bbox=bbox,
        visible=visible,
        proj=proj,
        camera=camera,
        n_splats=n,
    )


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _bin_tiles(rect, on_screen, tiles_x):
    """(tile id, splat id) pairs for every tile each splat's rectangle touches."""
    total = 0
    for i in range(rect.shape[0]):
        if on_screen[i]:
            total += (rect[i, 2] - rect[i, 0] + 1) * (rect[i, 3] - rect[i, 1] + 1)
    tiles = np.empty(total, np.int64)
    splats = np.empty(total, np.int64)
    k = 0
    for i in range(rect.shape[0]):
        if not on_screen[i]:
            continue
        for ty in range(rect[i, 1], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 2] + 1):
                tiles[k] = ty * tiles_x + tx
                splats[k] = i
                k += 1
    return tiles, splats


@njit(cache=True)
def _argsort_hits(z, entries, n):
    order = np.argsort(z[:n], kind="mergesort")
    return order


@njit(parallel=True, cache=True)
def _forward_kernel(rays, width, height, tile_size, tiles_x, offsets, entries, bbox,
                    center, t_u, t_v, normal, scale, opacity, attr,
                    z_near, alpha_skip, t_min, per_ray_sort, max_hits,
                    out_attr, out_depth, out_trans, hit_count, hit_entry, hit_w, hit_z):
    n_tiles = offsets.shape[0] - 1
    n_attr = attr.shape[1]
    origin = np.zeros(3, dtype=rays.dtype)
    for tile in prange(n_tiles):
        start = offsets[tile]
        stop = offsets[tile + 1]
        ty0 = (tile // tiles_x) * tile_size
        tx0 = (tile % tiles_x) * tile_size
        cand_z = np.empty(max(stop - start, 1), dtype=rays.dtype)
        cand_e = np.empty(max(stop - start, 1), dtype=np.int64)
        cand_a = np.empty(max(stop - start, 1), dtype=rays.dtype)
        for py in range(ty0, min(ty0 + tile_size, height)):
            for px in range(tx0, min(tx0 + tile_size, width)):
                p = py * width + px
                d = rays[p]
                T = 1.0
                k = 0
                if per_ray_sort:
                    m = 0
                    for e in range(start, stop):
                        j = entries[e]
                        if (px + 0.5 < bbox[j, 0] or px + 0.5 > bbox[j, 2]
                                or py + 0.5 < bbox[j, 1] or py + 0.5 > bbox[j, 3]):
                            continue
                        hit, u, v, t = intersect(center[j], t_u[j], t_v[j], normal[j],
                                                 scale[j, 0], scale[j, 1], origin, d, z_near)
                        if not hit:
                            continue
                        a = opacity[j] * math.exp(-0.5 * (u * u + v * v))
                        if a < alpha_skip:
                            continue
                        cand_z[m] = t * d[2]
                        cand_e[m] = e
                        cand_a[m] = a
                        m += 1
                    order = _argsort_hits(cand_z, cand_e, m)
                    for q in range(m):
                        o = order[q]
                        e = cand_e[o]
                        a = cand_a[o]
                        w = a * T
                        j = entries[e]
                        for c in range(n_attr):
                            out_attr[p, c] += w * attr[j, c]
                        out_depth[p] += w * cand_z[o]
                        hit_entry[k, p] = e
                        hit_w[k, p] = w
                        hit_z[k, p] = cand_z[o]
                        k += 1
                        T = T * (1.0 - a)
                        if T < t_min:
                            break
                else:
                    for e in range(start, stop):
                        j = entries[e]
                        if (px + 0.5 < bbox[j, 0] or px + 0.5 > bbox[j, 2]
                                or py + 0.5 < bbox[j, 1] or py + 0.5 > bbox[j, 3]):
                            continue
                        hit, u, v, t = intersect(center[j], t_u[j], t_v[j], normal[j],
                                                 scale[j, 0], scale[j, 1], origin, d, z_near)
                        if not hit:
                            continue
                        a = opacity[j] * math.exp(-0.5 * (u * u + v * v))
                        if a < alpha_skip:
                            continue
                        w = a * T
                        z = t * d[2]
                        for c in range(n_attr):
                            out_attr[p, c] += w * attr[j, c]
                        out_depth[p] += w * z
                        hit_entry[k, p] = e
                        hit_w[k, p] = w
                        hit_z[k, p] = z
                        k += 1
                        T = T * (1.0 - a)
                        if T < t_min:
                            break
                hit_count[p] = k
                out_trans[p] = T


@njit(parallel=True, cache=True)
def _backward_kernel(rays, width, height, tile_size, tiles_x, offsets, entries,
                     center, t_u, t_v, normal, scale, opacity, attr,
                     z_near, hit_count, hit_entry,
                     g_attr, g_depth, g_alpha, g_hit_w, g_hit_z, entry_grads):
    """Per-entry gradient columns:
    [0:n_attr] attr | +0:3 center | +3:6 t_u | +6:9 t_v | +9:12 normal |
    +12 s_u | +13 s_v | +14 opacity   (all camera space)
    """
    n_tiles = offsets.shape[0] - 1
    n_attr = attr.shape[1]
    L = hit_entry.shape[1]
    origin = np.zeros(3, dtype=rays.dtype)
    for tile in prange(n_tiles):
        ty0 = (tile // tiles_x) * tile_size
        tx0 = (tile % tiles_x) * tile_size
        a_buf = np.empty(max(L, 1), dtype=rays.dtype)
        T_buf = np.empty(max(L, 1), dtype=rays.dtype)
        for py in range(ty0, min(ty0 + tile_size, height)):
            for px in range(tx0, min(tx0 + tile_size, width)):
                p = py * width + px
                n_hits = hit_count[p]
                if n_hits == 0:
                    continue
                d = rays[p]
                T = 1.0
                for k in range(n_hits):
                    e = hit_entry[p, k]
                    j = entries[e]
                    hit, u, v, t = intersect(center[j], t_u[j], t_v[j], normal[j],
                                             scale[j, 0], scale[j, 1], origin, d, z_near)
                    a = opacity[j] * math.exp(-0.5 * (u * u + v * v))
                    a_buf[k] = a
                    T_buf[k] = T
                    T = T * (1.0 - a)
                S = 0.0
                for k in range(n_hits - 1, -1, -1):
                    e = hit_entry[p, k]
                    j = entries[e]
                    a = a_buf[k]
                    Tk = T_buf[k]
                    w = a * Tk
                    hit, u, v, t = intersect(center[j], t_u[j], t_v[j], normal[j],
                                             scale[j, 0], scale[j, 1], origin, d, z_near)
                    z = t * d[2]
                    gw = g_alpha[p] + g_hit_w[p, k] + g_depth[p] * z
                    for c in range(n_attr):
                        gw += g_attr[p, c] * attr[j, c]
                        entry_grads[e, c] += w * g_attr[p, c]
                    gz = g_depth[p] * w + g_hit_z[p, k]
                    ga = Tk * (gw - S)
                    S = gw * a + (1.0 - a) * S

                    G = math.exp(-0.5 * (u * u + v * v))
                    b = n_attr
                    entry_grads[e, b + 14] += ga * G
                    gG = ga * opacity[j]
                    gu = -u * G * gG
                    gv = -v * G * gG
                    su = scale[j, 0]
                    sv = scale[j, 1]
                    cu = gu / su
                    cv = gv / sv
                    gt = gz * d[2]
                    denom = normal[j, 0] * d[0] + normal[j, 1] * d[1] + normal[j, 2] * d[2]
                    for i in range(3):
                        r_i = t * d[i] - center[j, i]
                        gr_i = cu * t_u[j, i] + cv * t_v[j, i]
                        entry_grads[e, b + 3 + i] += cu * r_i
                        entry_grads[e, b + 6 + i] += cv * r_i
                        gt += gr_i * d[i]
                        entry_grads[e, b + i] -= gr_i
                    for i in range(3):
                        r_i = t * d[i] - center[j, i]
                        entry_grads[e, b + i] += gt * normal[j, i] / denom
                        entry_grads[e, b + 9 + i] -= gt * r_i / denom
                    entry_grads[e, b + 12] -= gu * u / su
                    entry_grads[e, b + 13] -= gv * v / sv


# ---------------------------------------------------------------------------
# public API


def rasterize(splats: Splats, camera: Camera, worklist: SortedWorkList,
              settings: RenderSettings = None) -> GBuffer:
    """Front-to-back alpha blending of all splat attributes into a G-buffer."""
    settings = settings or RenderSettings(tile_size=worklist.tile_size)
    if worklist.n_splats != len(splats) or worklist.camera is not camera:
        raise AssertionError("work list was built for different inputs")
    proj = worklist.proj
    dtype = proj.center.dtype
    H, W = camera.height, camera.width
    P = H * W
    feat_dim = splats.feature.shape[1]
    fsl, rough, nsl, n_attr = _layout(feat_dim)
    L = max(worklist.max_list, 1)

    rays = np.ascontiguousarray(camera.camera_rays(dtype).reshape(P, 3))
    out_attr = np.zeros((P, n_attr), dtype)
    out_depth = np.zeros(P, dtype)
    out_trans = np.ones(P, dtype)
    hit_count = np.zeros(P, np.int64)
    # slab-major (hit slot, pixel) so only the slots actually used get touched
    hit_entry = np.empty((L, P), np.int64)
    hit_w = np.empty((L, P), dtype)
    hit_z = np.empty((L, P), dtype)
    if len(worklist.entries):
        _forward_kernel(
            rays, W, H, worklist.tile_size, worklist.tiles_x, worklist.offsets, worklist.entries,
            worklist.bbox, proj.center, proj.t_u, proj.t_v, proj.normal, proj.scale, proj.opacity,
            proj.attr, settings.z_near, settings.alpha_skip, settings.t_min, settings.per_ray_sort, L,
            out_attr, out_depth, out_trans, hit_count, hit_entry, hit_w, hit_z,
        )

    alpha = 1.0 - out_trans
    normal_raw = out_attr[:, nsl]
    norm = np.linalg.norm(normal_raw, axis=1, keepdims=True)
    covered = (alpha > settings.coverage_eps)[:, None] & (norm > 1e-12)
    normal = np.where(covered, normal_raw / np.where(norm > 0, norm, 1.0), 0.0)

    # trim hit storage to the longest ray and pad the rest
    L_used = max(int(hit_count.max()) if P else 0, 1)
    used = np.arange(L_used)[:, None] < hit_count[None, :]
    hit_entry = np.where(used, hit_entry[:L_used], -1).T
    if len(worklist.entries):
        splat_idx = np.where(hit_entry >= 0, worklist.entries[np.maximum(hit_entry, 0)], -1)
    else:
        splat_idx = np.full_like(hit_entry, -1)
    hits = PerRayHits(
        count=hit_count.reshape(H, W),
        entry=np.ascontiguousarray(hit_entry).reshape(H, W, L_used),
        splat=splat_idx.reshape(H, W, L_used),
        weight=np.where(used, hit_w[:L_used], 0).T.reshape(H, W, L_used),
        depth=np.where(used, hit_z[:L_used], 0).T.reshape(H, W, L_used),
        splat_normals=np.ascontiguousarray(proj.attr[:, nsl]),
    )
    return GBuffer(
        diffuse=out_attr[:, DIFFUSE].reshape(H, W, 3),
        feature=out_attr[:, fsl].reshape(H, W, feat_dim),
        roughness=out_attr[:, rough].reshape(H, W),
        normal=normal.reshape(H, W, 3),
        depth=out_depth.reshape(H, W),
        alpha=alpha.reshape(H, W),
        hits=hits,
        normal_raw=normal_raw.reshape(H, W, 3),
    )


def _plane(grad, shape, dtype):
    if grad is None:
        return np.zeros(shape, dtype)
    return np.ascontiguousarray(np.broadcast_to(grad, shape), dtype=dtype)


def rasterize_backward(splats: Splats, camera: Camera, worklist: SortedWorkList,
                       gbuffer: GBuffer, grads: GBufferGrads,
                       settings: RenderSettings = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the G-buffer w.r.t. every raw splat field."""
    settings = settings or RenderSettings(tile_size=worklist.tile_size)
    if worklist.n_splats != len(splats) or worklist.camera is not camera:
        raise AssertionError("work list was built for different inputs")
    hits = gbuffer.hits
    if hits is None:
        raise AssertionError("G-buffer carries no traversal record")
    proj = worklist.proj
    dtype = proj.center.dtype
    H, W = camera.height, camera.width
    P = H * W
    feat_dim = splats.feature.shape[1]
    fsl, rough, nsl, n_attr = _layout(feat_dim)
    L = hits.entry.shape[2]

    # normal renormalization backward
    g_normal = _plane(grads.normal, (H, W, 3), dtype).reshape(P, 3)
    n_raw = gbuffer.normal_raw.reshape(P, 3)
    n_unit = gbuffer.normal.reshape(P, 3)
    norm = np.linalg.norm(n_raw, axis=1, keepdims=True)
    covered = np.any(n_unit != 0, axis=1, keepdims=True)
    g_raw = (g_normal - n_unit * np.sum(n_unit * g_normal, axis=1, keepdims=True)) / np.where(
        covered, norm, 1.0)
    g_raw = np.where(covered, g_raw, 0.0)

    g_attr = np.zeros((P, n_attr), dtype)
    g_attr[:, DIFFUSE] = _plane(grads.diffuse, (H, W, 3), dtype).reshape(P, 3)
    g_attr[:, fsl] = _plane(grads.feature, (H, W, feat_dim), dtype).reshape(P, feat_dim)
    g_attr[:, rough] = _plane(grads.roughness, (H, W), dtype).reshape(P)
    g_attr[:, nsl] = g_raw

    g_depth = _plane(grads.depth, (H, W), dtype).reshape(P)
    g_alpha = _plane(grads.alpha, (H, W), dtype).reshape(P)
    g_hit_w = _plane(grads.hit_weight, (H, W, L), dtype).reshape(P, L)
    g_hit_z = _plane(grads.hit_depth, (H, W, L), dtype).reshape(P, L)

    n_entries = len(worklist.entries)
    entry_grads = np.zeros((n_entries, n_attr + 15), dtype)
    rays = np.ascontiguousarray(camera.camera_rays(dtype).reshape(P, 3))
    if n_entries:
        _backward_kernel(
            rays, W, H, worklist.tile_size, worklist.tiles_x, worklist.offsets, worklist.entries,
            proj.center, proj.t_u, proj.t_v, proj.normal, proj.scale, proj.opacity, proj.attr,
            settings.z_near, hits.count.reshape(P), np.ascontiguousarray(hits.entry.reshape(P, L)),
            g_attr, g_depth, g_alpha, g_hit_w, g_hit_z, entry_grads,
        )

    n = len(splats)
    per_splat = np.zeros((n, n_attr + 15), dtype)
    np.add.at(per_splat, worklist.entries, entry_grads)

    # direct normal gradients from the normal-consistency loss
    if grads.hit_normal is not None:
        valid = hits.splat >= 0
        np.add.at(per_splat[:, nsl], hits.splat[valid], grads.hit_normal[valid])
    if grads.splat_normal is not None:
        per_splat[:, nsl] += grads.splat_normal

    return _chain_to_params(splats, camera, proj, per_splat, n_attr, fsl, rough, nsl)


def _chain_to_params(splats, camera, proj, g, n_attr, fsl, rough, nsl):
    Rc = camera.R.astype(g.dtype)
    b = n_attr
    g_center_c = g[:, b:b + 3]
    g_tu_c = g[:, b + 3:b + 6]
    g_tv_c = g[:, b + 6:b + 9]
    g_n_c = g[:, b + 9:b + 12]
    g_scale = g[:, b + 12:b + 14]
    g_opacity = g[:, b + 14]

    g_R = np.zeros((len(splats), 3, 3), g.dtype)
    g_R[:, :, 0] = g_tu_c @ Rc
    g_R[:, :, 1] = g_tv_c @ Rc
    g_R[:, :, 2] = g_n_c @ Rc + proj.facing_sign[:, None] * g[:, nsl]

    diffuse = sigmoid(splats.diffuse_raw)
    rough_v = sigmoid(splats.roughness_raw)
    alpha = sigmoid(splats.opacity_raw)
    return {
        "center": g_center_c @ Rc,
        "rotation": quat_to_matrix_backward(splats.rotation, g_R),
        "log_scale": g_scale * np.exp(splats.log_scale),
        "opacity_raw": g_opacity * alpha * (1 - alpha),
        "diffuse_raw": g[:, 0:3] * diffuse * (1 - diffuse),
        "roughness_raw": g[:, rough] * rough_v * (1 - rough_v),
        "feature": g[:, fsl].copy(),
    }
