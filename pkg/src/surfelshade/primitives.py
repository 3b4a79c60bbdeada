"""Scalar geometry primitives shared by the tiled rasterizer and the reference renderer."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

PARALLEL_EPS = 1e-8


@njit(cache=True)
def gaussian_weight(u, v):
    """Unnormalized isotropic 2D Gaussian in splat-local (u, v) coordinates."""
    return math.exp(-0.5 * (u * u + v * v))


@njit(cache=True)
def intersect(center, t_u, t_v, normal, s_u, s_v, origin, direction, z_near):
    """Ray / splat-plane intersection.

    Solves ``origin + t * direction = center + s_u*t_u*u + s_v*t_v*v`` and
    returns ``(hit, u, v, t)``. ``hit`` is False when the ray is parallel to
    the plane or the hit lies at ``t <= z_near``.
    """
    denom = normal[0] * direction[0] + normal[1] * direction[1] + normal[2] * direction[2]
    if abs(denom) < PARALLEL_EPS:
        return False, 0.0, 0.0, 0.0
    ox = center[0] - origin[0]
    oy = center[1] - origin[1]
    oz = center[2] - origin[2]
    t = (normal[0] * ox + normal[1] * oy + normal[2] * oz) / denom
    if t <= z_near:
        return False, 0.0, 0.0, t
    rx = t * direction[0] - ox
    ry = t * direction[1] - oy
    rz = t * direction[2] - oz
    u = (t_u[0] * rx + t_u[1] * ry + t_u[2] * rz) / s_u
    v = (t_v[0] * rx + t_v[1] * ry + t_v[2] * rz) / s_v
    return True, u, v, t


def ray_splat_intersect(center, t_u, t_v, scale, ray_origin, ray_dir, z_near=0.0):
    """Python-facing wrapper: ``(u, v, t)`` for a hit, ``None`` for a miss.

    ``t`` is the ray parameter; for a unit camera-space ray the view-space
    depth of the hit is ``t * ray_dir[2]``.
    """
    f = lambda a: np.ascontiguousarray(a, dtype=np.float64)
    t_u, t_v = f(t_u), f(t_v)
    normal = np.cross(t_u, t_v)
    hit, u, v, t = intersect(
        f(center), t_u, t_v, normal, float(scale[0]), float(scale[1]),
        f(ray_origin), f(ray_dir), float(z_near),
    )
    if not hit:
        return None
    return u, v, t
