"""Geometric primitives and the ray parameterizations fed to the networks.

Vectors are plain numpy arrays of shape (3,) in float64. Directions are
expected to be unit length unless noted. The numba cores at the bottom work
on unpacked scalars so the batch kernels elsewhere can inline them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi

# Absolute tolerance for point-in-box classification (scene units).
CONTAINMENT_TOL = 1e-6
# Radii below this collapse the radial direction; mapped to (0.5, 0.5).
DEGENERATE_RADIUS = 1e-9


def vec3(x, y, z) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


def length(v) -> float:
    return math.sqrt(float(v[0]) ** 2 + float(v[1]) ** 2 + float(v[2]) ** 2)


def normalize(v) -> np.ndarray:
    n = length(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return np.asarray(v, dtype=np.float64) / n


@dataclass
class GeometryStats:
    """Counters for rare parameterization corner cases, kept for inspection."""

    degenerate_center: int = 0
    pole_queries: int = 0

    def reset(self):
        self.degenerate_center = 0
        self.pole_queries = 0


STATS = GeometryStats()


class SphericalCoord(NamedTuple):
    u: float  # azimuth, [0, 1), wraps
    v: float  # polar, [0, 1], clamps


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit length


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def half_diagonal(self) -> np.ndarray:
        return 0.5 * (self.max - self.min)

    @property
    def diagonal(self) -> float:
        return length(self.max - self.min)

    def contains(self, p, tol: float = CONTAINMENT_TOL) -> bool:
        return bool(
            np.all(p >= self.min - tol) and np.all(p <= self.max + tol)
        )

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))


@dataclass(frozen=True)
class Triangle:
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    # per-vertex shading normals; default to the geometric normal
    n0: np.ndarray = None
    n1: np.ndarray = None
    n2: np.ndarray = None

    @staticmethod
    def from_vertices(v0, v1, v2, n0=None, n1=None, n2=None) -> "Triangle":
        v0, v1, v2 = vec3(*v0), vec3(*v1), vec3(*v2)
        gn = np.cross(v1 - v0, v2 - v0)
        area2 = length(gn)
        if area2 == 0.0:
            raise ValueError("degenerate triangle (zero area)")
        gn = gn / area2
        n0 = gn if n0 is None else normalize(n0)
        n1 = gn if n1 is None else normalize(n1)
        n2 = gn if n2 is None else normalize(n2)
        return Triangle(v0, v1, v2, n0, n1, n2)

    @property
    def geometric_normal(self) -> np.ndarray:
        return normalize(np.cross(self.v1 - self.v0, self.v2 - self.v0))

    @property
    def area(self) -> float:
        return 0.5 * length(np.cross(self.v1 - self.v0, self.v2 - self.v0))

    def bounds(self) -> Aabb:
        vs = np.stack([self.v0, self.v1, self.v2])
        return Aabb(vs.min(axis=0), vs.max(axis=0))


@dataclass(frozen=True)
class OuterQuery:
    """Ray from outside an object's box, encoded at the box entry point."""

    object_id: int
    p_prime: SphericalCoord
    d_prime: SphericalCoord


@dataclass(frozen=True)
class InnerQuery:
    """Ray whose origin lies inside an object's box."""

    object_id: int
    p_prime: SphericalCoord
    d_prime: SphericalCoord
    r_prime: float  # normalized distance of the origin from the box center


# ---------------------------------------------------------------------------
# scalar cores (numba)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _ray_aabb(ox, oy, oz, dx, dy, dz, lx, ly, lz, hx, hy, hz):
    """Slab test. Returns (hit, t_enter, t_exit) for the full line; the hit
    flag additionally requires t_exit >= max(t_enter, 0)."""
    t0 = -np.inf
    t1 = np.inf
    if dx != 0.0:
        inv = 1.0 / dx
        ta = (lx - ox) * inv
        tb = (hx - ox) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif ox < lx or ox > hx:
        return False, 0.0, 0.0
    if dy != 0.0:
        inv = 1.0 / dy
        ta = (ly - oy) * inv
        tb = (hy - oy) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif oy < ly or oy > hy:
        return False, 0.0, 0.0
    if dz != 0.0:
        inv = 1.0 / dz
        ta = (lz - oz) * inv
        tb = (hz - oz) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif oz < lz or oz > hz:
        return False, 0.0, 0.0
    if t1 < t0 or t1 < 0.0:
        return False, t0, t1
    return True, t0, t1


@njit(cache=True, inline="always")
def _ray_triangle(ox, oy, oz, dx, dy, dz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Moller-Trumbore with inclusive edges. Returns (t, b1, b2); t < 0 on miss."""
    e1x = bx - ax
    e1y = by - ay
    e1z = bz - az
    e2x = cx - ax
    e2y = cy - ay
    e2z = cz - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if -1e-12 < det < 1e-12:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - ax
    sy = oy - ay
    sz = oz - az
    b1 = (sx * px + sy * py + sz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return -1.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    b2 = (dx * qx + dy * qy + dz * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= 0.0:
        return -1.0, 0.0, 0.0
    return t, b1, b2


@njit(cache=True, inline="always")
def _dir_to_spherical(dx, dy, dz):
    u = (math.atan2(dy, dx) + math.pi) / TWO_PI
    if u >= 1.0:
        u -= 1.0
    elif u < 0.0:
        u += 1.0
    z = dz
    if z > 1.0:
        z = 1.0
    elif z < -1.0:
        z = -1.0
    v = math.acos(z) / math.pi
    return u, v


@njit(cache=True, inline="always")
def _spherical_to_dir(u, v):
    phi = u * TWO_PI - math.pi
    theta = v * math.pi
    st = math.sin(theta)
    return math.cos(phi) * st, math.sin(phi) * st, math.cos(theta)


@njit(cache=True, inline="always")
def _box_contains(px, py, pz, lx, ly, lz, hx, hy, hz, tol):
    return (
        lx - tol <= px <= hx + tol
        and ly - tol <= py <= hy + tol
        and lz - tol <= pz <= hz + tol
    )


@njit(cache=True, inline="always")
def _transform_outer(ox, oy, oz, dx, dy, dz, lx, ly, lz, hx, hy, hz, t_enter):
    """Encode an entering ray. Caller guarantees t_enter > 0 from a slab hit.

    Returns (pu, pv, du, dv, degenerate) where degenerate marks an entry
    point that coincides with the box center (flat boxes only)."""
    ex = ox + t_enter * dx
    ey = oy + t_enter * dy
    ez = oz + t_enter * dz
    cx = 0.5 * (lx + hx)
    cy = 0.5 * (ly + hy)
    cz = 0.5 * (lz + hz)
    rx = ex - cx
    ry = ey - cy
    rz = ez - cz
    rn = math.sqrt(rx * rx + ry * ry + rz * rz)
    if rn < DEGENERATE_RADIUS:
        pu, pv = 0.5, 0.5
        deg = True
    else:
        pu, pv = _dir_to_spherical(rx / rn, ry / rn, rz / rn)
        deg = False
    du, dv = _dir_to_spherical(dx, dy, dz)
    return pu, pv, du, dv, deg


@njit(cache=True, inline="always")
def _transform_inner(px, py, pz, dx, dy, dz, lx, ly, lz, hx, hy, hz):
    """Encode a ray starting inside the box. Returns (pu, pv, du, dv, r, deg)."""
    cx = 0.5 * (lx + hx)
    cy = 0.5 * (ly + hy)
    cz = 0.5 * (lz + hz)
    rx = px - cx
    ry = py - cy
    rz = pz - cz
    rn = math.sqrt(rx * rx + ry * ry + rz * rz)
    hx_ = 0.5 * (hx - lx)
    hy_ = 0.5 * (hy - ly)
    hz_ = 0.5 * (hz - lz)
    hn = math.sqrt(hx_ * hx_ + hy_ * hy_ + hz_ * hz_)
    if rn < DEGENERATE_RADIUS:
        pu, pv = 0.5, 0.5
        deg = True
        r = 0.0
    else:
        pu, pv = _dir_to_spherical(rx / rn, ry / rn, rz / rn)
        deg = False
        r = rn / hn
        if r > 1.0:
            r = 1.0
    du, dv = _dir_to_spherical(dx, dy, dz)
    return pu, pv, du, dv, r, deg


# ---------------------------------------------------------------------------
# public wrappers
# ---------------------------------------------------------------------------


def ray_aabb_intersect(ray: Ray, box: Aabb) -> Optional[Tuple[float, float]]:
    """Slab intersection. Returns (t_enter, t_exit) or None; t_enter may be
    negative when the origin is inside the box."""
    hit, t0, t1 = _ray_aabb(
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        box.min[0], box.min[1], box.min[2],
        box.max[0], box.max[1], box.max[2],
    )
    if not hit:
        return None
    return float(t0), float(t1)


def ray_triangle_intersect(ray: Ray, tri: Triangle):
    """Returns (t, (b1, b2)) for the closest forward hit, or None."""
    t, b1, b2 = _ray_triangle(
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        tri.v0[0], tri.v0[1], tri.v0[2],
        tri.v1[0], tri.v1[1], tri.v1[2],
        tri.v2[0], tri.v2[1], tri.v2[2],
    )
    if t < 0.0:
        return None
    return float(t), (float(b1), float(b2))


def dir_to_spherical(d) -> SphericalCoord:
    """Map a unit direction to (azimuth, polar) in [0,1) x [0,1].

    The azimuth axis wraps; the polar axis clamps. (0,0,0)-adjacent inputs
    are rejected rather than guessed."""
    n = length(d)
    if abs(n - 1.0) > 1e-6:
        raise ValueError("dir_to_spherical expects a unit vector")
    u, v = _dir_to_spherical(float(d[0]), float(d[1]), float(d[2]))
    if abs(float(d[2])) > 1.0 - 1e-6:
        STATS.pole_queries += 1
    return SphericalCoord(u, v)


def spherical_to_dir(c: SphericalCoord) -> np.ndarray:
    x, y, z = _spherical_to_dir(float(c[0]), float(c[1]))
    return vec3(x, y, z)


def transform_outer(ray: Ray, box: Aabb, object_id: int = 0) -> OuterQuery:
    """Parameterize a ray that enters `box` from outside.

    All rays along one line entering the box share an encoding, which is what
    lets a hemisphere of directions reuse one grid cell."""
    res = ray_aabb_intersect(ray, box)
    if res is None:
        raise ValueError("ray misses the box; outer queries need an entry point")
    t0, _ = res
    if t0 <= 0.0:
        raise ValueError("ray origin is inside or on the box; use transform_inner")
    pu, pv, du, dv, deg = _transform_outer(
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        box.min[0], box.min[1], box.min[2],
        box.max[0], box.max[1], box.max[2],
        t0,
    )
    if deg:
        STATS.degenerate_center += 1
    return OuterQuery(object_id, SphericalCoord(pu, pv), SphericalCoord(du, dv))


def transform_inner(point, direction, box: Aabb, object_id: int = 0) -> InnerQuery:
    """Parameterize a ray whose origin `point` lies inside (or on) `box`."""
    if not box.contains(point):
        raise ValueError("point is outside the box; use transform_outer")
    pu, pv, du, dv, r, deg = _transform_inner(
        float(point[0]), float(point[1]), float(point[2]),
        float(direction[0]), float(direction[1]), float(direction[2]),
        box.min[0], box.min[1], box.min[2],
        box.max[0], box.max[1], box.max[2],
    )
    if deg:
        STATS.degenerate_center += 1
    return InnerQuery(
        object_id, SphericalCoord(pu, pv), SphericalCoord(du, dv), float(r)
    )
