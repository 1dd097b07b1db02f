"""Progressive direct-lighting renderer with pluggable visibility.

Shading is single-bounce Lambertian: one light sample and one secondary ray
per pixel sample. Every random draw is a stateless hash of (seed, pixel,
sample index, draw slot), so images are reproducible no matter how work is
split across threads, and a render over sample indices [k, k+n) is the
exact continuation of one over [0, k).

Visibility is a strategy object: the reference backend answers shadow rays
from the two-level tree, while predictor backends run the split pass that
first gathers per-object queries along each shadow segment and then answers
them in one batch. A predictor backed by per-object tree lookups gives the
ground-truth twin of the learned one, which is what the pipeline tests use.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from . import bvh as _bvh
from .bvh import (
    BottomLevelBvh,
    ScenePack,
    TopLevelBvh,
    _k_closest,
    _k_gather_queries,
    _k_label_visible,
    _k_occluded,
    _k_occluded_by_object,
    build_top,
    pack_scene,
)
from .geometry import Aabb, Ray, _spherical_to_dir, normalize, vec3

EPSILON_SCALE = 1e-4       # self-intersection threshold as a fraction of scene size
GAMMA = 1.0 / 2.2
PSNR_SENTINEL = math.inf   # identical tonemapped images
DEFAULT_TRI_THRESHOLD = 10_000
_BAND = 8192               # rays per kernel band; fixed so splits never depend on workers


def worker_count(requested: Optional[int] = None) -> int:
    """Resolve the thread budget; NIF_THREADS=0 or unset means all cores."""
    if requested is None:
        raw = os.environ.get("NIF_THREADS", "0")
        try:
            requested = int(raw)
        except ValueError as e:
            raise ValueError(f"NIF_THREADS must be an integer, got {raw!r}") from e
    if requested < 0:
        raise ValueError("thread count cannot be negative")
    if requested == 0:
        return os.cpu_count() or 1
    return requested


def _bands(n: int) -> List[Tuple[int, int]]:
    return [(i, min(i + _BAND, n)) for i in range(0, n, _BAND)]


def run_banded(fn: Callable[[int, int, int], None], n: int, threads: int):
    """Run fn(band_index, i0, i1) over fixed-size ranges of [0, n)."""
    bands = _bands(n)
    if threads <= 1 or len(bands) <= 1:
        for b, (i0, i1) in enumerate(bands):
            fn(b, i0, i1)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, b, i0, i1) for b, (i0, i1) in enumerate(bands)]
        for f in futures:
            f.result()


# ---------------------------------------------------------------------------
# stateless RNG
# ---------------------------------------------------------------------------

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _rand01(seed, pixel, sample, draw):
    x = np.uint64(seed) + _GOLD
    x = _mix64(x + np.uint64(pixel) * _MIX1)
    x = _mix64(x + np.uint64(sample) * _MIX2)
    x = _mix64(x + np.uint64(draw) * _GOLD)
    return (x >> np.uint64(11)) * _INV53


# ---------------------------------------------------------------------------
# camera and lights
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float  # degrees
    width: int
    height: int

    def basis(self):
        fwd = normalize(self.look_at - self.position)
        right = normalize(np.cross(fwd, self.up))
        true_up = np.cross(right, fwd)
        tan_half = math.tan(math.radians(self.vertical_fov) * 0.5)
        aspect = self.width / self.height
        return fwd, right, true_up, tan_half, aspect


@dataclass
class PointLight:
    position: np.ndarray
    intensity: np.ndarray  # radiant intensity per channel


@dataclass
class AreaLight:
    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    radiance: np.ndarray  # one-sided, facing along cross(edge_u, edge_v)

    @staticmethod
    def from_corners(corners, radiance) -> "AreaLight":
        """Build from four corners ordered around the quad (parallelogram)."""
        c = [vec3(*p) for p in corners]
        return AreaLight(c[0], c[1] - c[0], c[3] - c[0], vec3(*radiance))

    @property
    def normal(self) -> np.ndarray:
        return normalize(np.cross(self.edge_u, self.edge_v))

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))


@dataclass
class EnvironmentLight:
    image: np.ndarray  # lat-long radiance map, (H, W, 3)


Light = object  # PointLight | AreaLight; the environment rides separately


@dataclass
class TabledCdf:
    cumulative: np.ndarray  # normalized, last entry 1.0

    def __len__(self):
        return len(self.cumulative)


def sample_cdf(cdf: TabledCdf, u: float) -> int:
    """Smallest index whose cumulative weight strictly exceeds u."""
    i = int(np.searchsorted(cdf.cumulative, u, side="right"))
    return min(i, len(cdf.cumulative) - 1)


def _env_texel_geometry(image: np.ndarray):
    h, w = image.shape[:2]
    rows = np.arange(h)
    theta0 = rows * math.pi / h
    theta1 = (rows + 1) * math.pi / h
    solid = (2.0 * math.pi / w) * (np.cos(theta0) - np.cos(theta1))  # per row
    return np.repeat(solid, w)


def _light_flux(light) -> float:
    if isinstance(light, PointLight):
        return float(np.mean(light.intensity)) * 4.0 * math.pi
    if isinstance(light, AreaLight):
        return float(np.mean(light.radiance)) * math.pi * light.area
    raise TypeError(f"unknown light type {type(light).__name__}")


def build_light_cdf(lights: Sequence, environment: Optional[EnvironmentLight] = None) -> TabledCdf:
    """Flux-weighted selection table; the environment, when present, is the
    final entry."""
    weights = [_light_flux(l) for l in lights]
    if environment is not None:
        solid = _env_texel_geometry(environment.image)
        mean_rgb = environment.image.mean(axis=2).reshape(-1)
        weights.append(float(np.sum(mean_rgb * solid)))
    w = np.asarray(weights, np.float64)
    if len(w) == 0:
        raise ValueError("no lights to sample")
    total = w.sum()
    if not (total > 0.0):
        raise ValueError("lights have zero total flux")
    cum = np.cumsum(w) / total
    cum[-1] = 1.0
    return TabledCdf(cum)


# packed-light kind codes for the kernels
_L_POINT = 0
_L_AREA = 1
_L_ENV = 2


def _pack_lights(lights, environment):
    n = len(lights) + (1 if environment is not None else 0)
    kind = np.zeros(n, np.uint8)
    data = np.zeros((n, 16), np.float64)
    for i, l in enumerate(lights):
        if isinstance(l, PointLight):
            kind[i] = _L_POINT
            data[i, 0:3] = l.position
            data[i, 3:6] = l.intensity
        elif isinstance(l, AreaLight):
            kind[i] = _L_AREA
            data[i, 0:3] = l.corner
            data[i, 3:6] = l.edge_u
            data[i, 6:9] = l.edge_v
            data[i, 9:12] = l.radiance
            data[i, 12:15] = l.normal
            data[i, 15] = l.area
        else:
            raise TypeError(f"unknown light type {type(l).__name__}")
    if environment is not None:
        kind[-1] = _L_ENV
        img = environment.image
        solid = _env_texel_geometry(img)
        mean_rgb = img.mean(axis=2).reshape(-1)
        w = mean_rgb * solid
        total = w.sum()
        if not (total > 0.0) and len(lights) == 0:
            raise ValueError("environment map has zero energy")
        env_cdf = np.cumsum(w) / total if total > 0 else np.linspace(0, 1, len(w))
        env_cdf[-1] = 1.0
        env_pdf = np.where(solid > 0, (w / total) / np.maximum(solid, 1e-300), 0.0)
        env_img = np.ascontiguousarray(img, np.float64)
    else:
        env_cdf = np.zeros(1, np.float64)
        env_pdf = np.zeros(1, np.float64)
        env_img = np.zeros((1, 1, 3), np.float64)
    return kind, data, env_img, env_cdf, env_pdf


@njit(cache=True, inline="always")
def _sample_light_core(
    l_kind, l_data, cum, env_img, env_cdf, env_pdf,
    px, py, pz, u_sel, u_a, u_b,
):
    """Pick a light by the flux table, then a direction on it.

    Returns (dx, dy, dz, t_max, pdf, er, eg, eb); pdf is per solid angle
    except for the point light's delta, which folds to pdf = 1 with the
    emitted term already divided by squared distance."""
    li = np.searchsorted(cum, u_sel, side="right")
    if li >= len(cum):
        li = len(cum) - 1
    sel_pmf = cum[li] - (cum[li - 1] if li > 0 else 0.0)
    k = l_kind[li]
    if k == _L_POINT:
        vx = l_data[li, 0] - px
        vy = l_data[li, 1] - py
        vz = l_data[li, 2] - pz
        d = math.sqrt(vx * vx + vy * vy + vz * vz)
        if d <= 0.0:
            return 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0
        inv = 1.0 / d
        inv2 = inv * inv
        return (
            vx * inv, vy * inv, vz * inv, d, sel_pmf,
            l_data[li, 3] * inv2, l_data[li, 4] * inv2, l_data[li, 5] * inv2,
        )
    if k == _L_AREA:
        sx = l_data[li, 0] + u_a * l_data[li, 3] + u_b * l_data[li, 6]
        sy = l_data[li, 1] + u_a * l_data[li, 4] + u_b * l_data[li, 7]
        sz = l_data[li, 2] + u_a * l_data[li, 5] + u_b * l_data[li, 8]
        vx = sx - px
        vy = sy - py
        vz = sz - pz
        d2 = vx * vx + vy * vy + vz * vz
        d = math.sqrt(d2)
        if d <= 0.0:
            return 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0
        inv = 1.0 / d
        dx = vx * inv
        dy = vy * inv
        dz = vz * inv
        cos_l = -(dx * l_data[li, 12] + dy * l_data[li, 13] + dz * l_data[li, 14])
        if cos_l <= 0.0:
            # facing away; zero contribution, pdf kept positive
            return dx, dy, dz, d, sel_pmf, 0.0, 0.0, 0.0
        pdf = sel_pmf * d2 / (l_data[li, 15] * cos_l)
        return dx, dy, dz, d, pdf, l_data[li, 9], l_data[li, 10], l_data[li, 11]
    # environment
    ti = np.searchsorted(env_cdf, u_a, side="right")
    if ti >= len(env_cdf):
        ti = len(env_cdf) - 1
    w = env_img.shape[1]
    r = ti // w
    c = ti % w
    dx, dy, dz = _spherical_to_dir((c + 0.5) / w, (r + 0.5) / env_img.shape[0])
    pdf = sel_pmf * env_pdf[ti]
    if pdf <= 0.0:
        return dx, dy, dz, np.inf, 1.0, 0.0, 0.0, 0.0
    return dx, dy, dz, np.inf, pdf, env_img[r, c, 0], env_img[r, c, 1], env_img[r, c, 2]


@njit(cache=True, inline="always")
def _uniform_dir_core(u_a, u_b):
    z = 1.0 - 2.0 * u_a
    s = math.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * u_b
    return math.cos(phi) * s, math.sin(phi) * s, z


UNIFORM_PDF = 1.0 / (4.0 * math.pi)


def sample_light_dir(shading_point, light, u_a: float = 0.0, u_b: float = 0.0):
    """Sample one direction toward the given light. Returns
    (direction, t_max, pdf, emitted). The pdf is per solid angle for area
    and environment lights; the point light's delta collapses to pdf 1 with
    the inverse-square falloff folded into the emitted term."""
    if isinstance(light, EnvironmentLight):
        kind, data, env_img, env_cdf, env_pdf = _pack_lights([], light)
    else:
        kind, data, env_img, env_cdf, env_pdf = _pack_lights([light], None)
    cum = np.ones(1, np.float64)
    dx, dy, dz, tmax, pdf, er, eg, eb = _sample_light_core(
        kind, data, cum, env_img, env_cdf, env_pdf,
        float(shading_point[0]), float(shading_point[1]), float(shading_point[2]),
        0.0, float(u_a), float(u_b),
    )
    return vec3(dx, dy, dz), float(tmax), float(pdf), vec3(er, eg, eb)


def sample_uniform_dir(u_a: float, u_b: float):
    """Uniform direction on the sphere and its constant pdf."""
    dx, dy, dz = _uniform_dir_core(float(u_a), float(u_b))
    return vec3(dx, dy, dz), UNIFORM_PDF


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------


@dataclass
class SceneObject:
    name: str
    bvh: BottomLevelBvh
    albedo: np.ndarray
    nif_enabled: bool = True

    @property
    def n_triangles(self) -> int:
        return self.bvh.n_triangles

    @property
    def bounds(self) -> Aabb:
        return self.bvh.bounds


def _empty_scene_pack() -> ScenePack:
    """A pack whose single inverted top node rejects every ray; lets a scene
    with no geometry render (to background) without special-casing kernels."""
    f3 = lambda v: np.full((1, 3), v, np.float64)
    i0 = np.zeros(0, np.int64)
    return ScenePack(
        t_lo=f3(np.inf), t_hi=f3(-np.inf),
        t_a=np.zeros(1, np.int64), t_b=np.zeros(1, np.int64),
        t_leaf=np.ones(1, np.uint8), t_order=i0,
        roots=i0,
        b_lo=np.zeros((0, 3)), b_hi=np.zeros((0, 3)),
        b_a=i0, b_b=i0, b_leaf=np.zeros(0, np.uint8),
        v0=np.zeros((0, 3)), v1=np.zeros((0, 3)), v2=np.zeros((0, 3)),
        n0=np.zeros((0, 3)), n1=np.zeros((0, 3)), n2=np.zeros((0, 3)),
        src=i0, prim_off=np.zeros(1, np.int64),
        obox_lo=np.zeros((0, 3)), obox_hi=np.zeros((0, 3)),
        tri_counts=i0,
    )


class Scene:
    """Runtime scene: packed two-level acceleration plus lights and camera."""

    def __init__(self, objects: Sequence[SceneObject], lights: Sequence = (),
                 camera: Optional[Camera] = None, seed: int = 0,
                 environment: Optional[EnvironmentLight] = None):
        self.objects = list(objects)
        self.lights = list(lights)
        self.camera = camera
        self.seed = seed
        self.environment = environment
        if self.objects:
            self.top: TopLevelBvh = build_top([o.bounds for o in self.objects])
            self.pack: ScenePack = pack_scene([o.bvh for o in self.objects], self.top)
            self.bounds = Aabb(self.pack.t_lo[0].copy(), self.pack.t_hi[0].copy())
            self.diagonal = self.bounds.diagonal
            self.albedo = np.stack([o.albedo for o in self.objects]).astype(np.float64)
        else:
            self.top = None
            self.pack = _empty_scene_pack()
            self.bounds = None
            self.diagonal = 1.0
            self.albedo = np.zeros((0, 3), np.float64)
        self.epsilon_t = EPSILON_SCALE * self.diagonal
        self.nif_enabled = np.array([o.nif_enabled for o in self.objects], np.uint8)
        self._light_pack = None
        self._light_cdf = None

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def light_tables(self):
        if self._light_pack is None:
            self._light_cdf = build_light_cdf(self.lights, self.environment)
            self._light_pack = _pack_lights(self.lights, self.environment)
        return self._light_cdf, self._light_pack

    def nif_route_mask(self, hybrid_threshold: Optional[int] = None) -> np.ndarray:
        """Objects answered by the learned backend; the rest fall back to
        their own trees. A threshold routes small objects away."""
        route = self.nif_enabled.copy()
        if hybrid_threshold is not None:
            route &= (self.pack.tri_counts >= hybrid_threshold).astype(np.uint8)
        return route


# ---------------------------------------------------------------------------
# per-sample passes
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _k_primary(
    cpx, cpy, cpz, fx, fy, fz, rx, ry, rz, ux, uy, uz, tan_half, aspect,
    width, height, seed, sample,
    t_lo, t_hi, t_a, t_b, t_leaf, t_order,
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, n0, n1, n2,
    i0, i1, eps,
    out_hit, out_t, out_obj, out_point, out_normal, out_dir,
):
    for i in range(i0, i1):
        px = i % width
        py = i // width
        jx = _rand01(seed, i, sample, 0)
        jy = _rand01(seed, i, sample, 1)
        sx = ((px + jx) / width) * 2.0 - 1.0
        sy = 1.0 - ((py + jy) / height) * 2.0
        dx = fx + sx * tan_half * aspect * rx + sy * tan_half * ux
        dy = fy + sx * tan_half * aspect * ry + sy * tan_half * uy
        dz = fz + sx * tan_half * aspect * rz + sy * tan_half * uz
        dn = math.sqrt(dx * dx + dy * dy + dz * dz)
        dx /= dn
        dy /= dn
        dz /= dn
        out_dir[i, 0] = dx
        out_dir[i, 1] = dy
        out_dir[i, 2] = dz
        t, o, slot, bu, bv = _bvh._scene_closest(
            t_lo, t_hi, t_a, t_b, t_leaf, t_order,
            roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
            cpx, cpy, cpz, dx, dy, dz, eps,
        )
        if slot >= 0:
            out_hit[i] = 1
            out_t[i] = t
            out_obj[i] = o
            out_point[i, 0] = cpx + t * dx
            out_point[i, 1] = cpy + t * dy
            out_point[i, 2] = cpz + t * dz
            b0 = 1.0 - bu - bv
            nx = b0 * n0[slot, 0] + bu * n1[slot, 0] + bv * n2[slot, 0]
            ny = b0 * n0[slot, 1] + bu * n1[slot, 1] + bv * n2[slot, 1]
            nz = b0 * n0[slot, 2] + bu * n1[slot, 2] + bv * n2[slot, 2]
            nn = math.sqrt(nx * nx + ny * ny + nz * nz)
            if nn > 0.0:
                nx /= nn
                ny /= nn
                nz /= nn
            out_normal[i, 0] = nx
            out_normal[i, 1] = ny
            out_normal[i, 2] = nz
        else:
            out_hit[i] = 0
            out_t[i] = np.inf
            out_obj[i] = -1


@njit(cache=True, nogil=True)
def _k_light_sample(
    l_kind, l_data, cum, env_img, env_cdf, env_pdf,
    points, hit, seed, sample, i0, i1,
    out_dir, out_tmax, out_pdf, out_emit,
):
    for i in range(i0, i1):
        if hit[i] == 0:
            continue
        u_sel = _rand01(seed, i, sample, 2)
        u_a = _rand01(seed, i, sample, 3)
        u_b = _rand01(seed, i, sample, 4)
        dx, dy, dz, tmax, pdf, er, eg, eb = _sample_light_core(
            l_kind, l_data, cum, env_img, env_cdf, env_pdf,
            points[i, 0], points[i, 1], points[i, 2], u_sel, u_a, u_b,
        )
        out_dir[i, 0] = dx
        out_dir[i, 1] = dy
        out_dir[i, 2] = dz
        out_tmax[i] = tmax
        out_pdf[i] = pdf
        out_emit[i, 0] = er
        out_emit[i, 1] = eg
        out_emit[i, 2] = eb


@njit(cache=True, nogil=True)
def _k_uniform_dirs(hit, seed, sample, i0, i1, out_dir, out_tmax, out_pdf):
    for i in range(i0, i1):
        if hit[i] == 0:
            continue
        u_a = _rand01(seed, i, sample, 2)
        u_b = _rand01(seed, i, sample, 3)
        dx, dy, dz = _uniform_dir_core(u_a, u_b)
        out_dir[i, 0] = dx
        out_dir[i, 1] = dy
        out_dir[i, 2] = dz
        out_tmax[i] = np.inf
        out_pdf[i] = UNIFORM_PDF


def env_radiance(environment: Optional[EnvironmentLight], dirs: np.ndarray) -> np.ndarray:
    """Lat-long lookup for rays that leave the scene."""
    if environment is None:
        return np.zeros((len(dirs), 3), np.float64)
    img = environment.image
    h, w = img.shape[:2]
    u = (np.arctan2(dirs[:, 1], dirs[:, 0]) + math.pi) / (2.0 * math.pi)
    u = np.where(u >= 1.0, u - 1.0, u)
    v = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0)) / math.pi
    c = np.clip((u * w).astype(np.int64), 0, w - 1)
    r = np.clip((v * h).astype(np.int64), 0, h - 1)
    return img[r, c].astype(np.float64)


# ---------------------------------------------------------------------------
# visibility backends
# ---------------------------------------------------------------------------


@dataclass
class ShadowRays:
    origins: np.ndarray
    dirs: np.ndarray
    tmaxs: np.ndarray

    def __len__(self):
        return len(self.origins)


@dataclass
class QueryRecords:
    """Per-(ray, object) work emitted by the gather phase."""

    kind: np.ndarray   # 0 outer, 1 inner
    obj: np.ndarray
    ray: np.ndarray
    coord: np.ndarray  # (n, 5): p_u, p_v, d_u, d_v, r
    degenerate_count: int = 0

    def __len__(self):
        return len(self.kind)


class BvhBackend:
    """Reference visibility straight from the two-level tree."""

    name = "bvh"

    def occluded(self, scene: Scene, rays: ShadowRays, threads: int = 1) -> np.ndarray:
        n = len(rays)
        out = np.zeros(n, np.uint8)

        def band(b, i0, i1):
            _k_occluded(
                *scene.pack.top_args(), *scene.pack.bottom_args(),
                rays.origins, rays.dirs, rays.tmaxs, i0, i1,
                scene.epsilon_t, out,
            )

        run_banded(band, n, threads)
        return out.astype(bool)


def gather_queries(scene: Scene, rays: ShadowRays, route: np.ndarray,
                   threads: int = 1):
    """Phase one of the split pass. Returns (records, bvh_occluded) where
    bvh_occluded covers the objects routed away from the predictor."""
    n = len(rays)
    n_obj = scene.n_objects
    rec_kind = np.full(n * n_obj, 255, np.uint8)
    rec_obj = np.zeros(n * n_obj, np.int32)
    rec_ray = np.zeros(n * n_obj, np.int32)
    rec_coord = np.zeros((n * n_obj, 5), np.float64)
    bvh_occ = np.zeros(n, np.uint8)
    stats = np.zeros((len(_bands(n)) or 1, 2), np.int64)

    def band(b, i0, i1):
        _k_gather_queries(
            *scene.pack.top_args(), *scene.pack.bottom_args(),
            scene.pack.obox_lo, scene.pack.obox_hi, route,
            rays.origins, rays.dirs, rays.tmaxs, i0, i1,
            scene.epsilon_t, 1e-6,
            rec_kind, rec_obj, rec_ray, rec_coord, bvh_occ, stats[b],
        )

    run_banded(band, n, threads)
    keep = rec_kind != 255
    records = QueryRecords(
        kind=rec_kind[keep],
        obj=rec_obj[keep],
        ray=rec_ray[keep],
        coord=rec_coord[keep],
        degenerate_count=int(stats[:, 0].sum()),
    )
    return records, bvh_occ.astype(bool)


def oracle_predictor(scene: Scene, records: QueryRecords, rays: ShadowRays,
                     threads: int = 1) -> np.ndarray:
    """Answer gathered queries from per-object tree lookups. Swapping this
    for the learned predictor must not change anything else in the pass."""
    n = len(records)
    out = np.zeros(n, np.uint8)

    def band(b, j0, j1):
        _k_label_visible(
            *scene.pack.bottom_args(),
            records.obj, records.ray, rays.origins, rays.dirs, rays.tmaxs,
            j0, j1, scene.epsilon_t, out,
        )

    run_banded(band, n, threads)
    return out == 0  # labels are 1 = clear


class PredictorBackend:
    """Split gather/answer visibility around any per-query predictor."""

    name = "predictor"

    def __init__(self, predictor, hybrid_threshold: Optional[int] = None):
        self.predictor = predictor
        self.hybrid_threshold = hybrid_threshold
        self.last_records: Optional[QueryRecords] = None

    def occluded(self, scene: Scene, rays: ShadowRays, threads: int = 1) -> np.ndarray:
        route = scene.nif_route_mask(self.hybrid_threshold)
        records, occ = gather_queries(scene, rays, route, threads)
        self.last_records = records
        if len(records):
            rec_occ = self.predictor(scene, records, rays, threads)
            occ = occ.copy()
            occ[records.ray[rec_occ]] = True
        return occ


class OracleBackend(PredictorBackend):
    """The split pass with ground-truth answers; must match BvhBackend
    pixel for pixel."""

    name = "oracle"

    def __init__(self, hybrid_threshold: Optional[int] = None):
        super().__init__(oracle_predictor, hybrid_threshold)


def shade_pass_nif(scene: Scene, rays: ShadowRays, predictor,
                   hybrid_threshold: Optional[int] = None,
                   threads: int = 1) -> np.ndarray:
    """Occlusion bits for a batch of shadow rays via the split pass."""
    return PredictorBackend(predictor, hybrid_threshold).occluded(scene, rays, threads)


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


@dataclass
class RenderConfig:
    spp: int = 16
    sample_offset: int = 0
    seed: Optional[int] = None  # None: use the scene's seed
    threads: Optional[int] = None  # None: NIF_THREADS or all cores


@dataclass
class HdrImage:
    """Accumulation buffer: per-pixel radiance sums and a sample count."""

    sum: np.ndarray  # (H, W, 3) float64
    count: int
    timings: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.sum.shape[0]

    @property
    def width(self) -> int:
        return self.sum.shape[1]

    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.sum)
        return self.sum / self.count

    def merge(self, other: "HdrImage") -> "HdrImage":
        if self.sum.shape != other.sum.shape:
            raise ValueError("image shapes differ")
        return HdrImage(self.sum + other.sum, self.count + other.count)


def sample_pass(scene: Scene, camera: Camera, sample: int, seed: int,
                threads: int, sampler: str = "importance"):
    """Trace one sample index for every pixel: primary hit data plus one
    light (or uniform) direction per hit. Returns a dict of arrays."""
    w, h = camera.width, camera.height
    n = w * h
    fwd, right, up, tan_half, aspect = camera.basis()
    hit = np.zeros(n, np.uint8)
    t = np.zeros(n, np.float64)
    obj = np.zeros(n, np.int32)
    point = np.zeros((n, 3), np.float64)
    normal = np.zeros((n, 3), np.float64)
    pdir = np.zeros((n, 3), np.float64)

    def primary_band(b, i0, i1):
        _k_primary(
            camera.position[0], camera.position[1], camera.position[2],
            fwd[0], fwd[1], fwd[2], right[0], right[1], right[2],
            up[0], up[1], up[2], tan_half, aspect, w, h, seed, sample,
            *scene.pack.top_args(), *scene.pack.bottom_args(),
            scene.pack.n0, scene.pack.n1, scene.pack.n2,
            i0, i1, scene.epsilon_t,
            hit, t, obj, point, normal, pdir,
        )

    run_banded(primary_band, n, threads)

    ldir = np.zeros((n, 3), np.float64)
    tmax = np.zeros(n, np.float64)
    pdf = np.zeros(n, np.float64)
    emit = np.zeros((n, 3), np.float64)
    if sampler == "importance":
        if not scene.lights and scene.environment is None:
            # nothing to sample; pdf stays zero so no shadow rays are cast
            return {
                "hit": hit.astype(bool), "t": t, "obj": obj, "point": point,
                "normal": normal, "pdir": pdir, "ldir": ldir, "tmax": tmax,
                "pdf": pdf, "emit": emit,
            }
        cdf, (l_kind, l_data, env_img, env_cdf, env_pdf) = scene.light_tables()

        def light_band(b, i0, i1):
            _k_light_sample(
                l_kind, l_data, cdf.cumulative, env_img, env_cdf, env_pdf,
                point, hit, seed, sample, i0, i1, ldir, tmax, pdf, emit,
            )

        run_banded(light_band, n, threads)
    elif sampler == "uniform":

        def ubandf(b, i0, i1):
            _k_uniform_dirs(hit, seed, sample, i0, i1, ldir, tmax, pdf)

        run_banded(ubandf, n, threads)
        emit[:] = 1.0  # labels only; never shaded
    else:
        raise ValueError(f"unknown sampler {sampler!r}")

    return {
        "hit": hit.astype(bool), "t": t, "obj": obj, "point": point,
        "normal": normal, "pdir": pdir, "ldir": ldir, "tmax": tmax,
        "pdf": pdf, "emit": emit,
    }


def render(scene: Scene, camera: Camera = None, config: RenderConfig = None,
           backend=None) -> HdrImage:
    """Accumulate config.spp samples per pixel starting at
    config.sample_offset. Merging the results of two renders over adjacent
    sample ranges is exactly the same image as one longer accumulation."""
    config = config or RenderConfig()
    camera = camera or scene.camera
    if camera is None:
        raise ValueError("no camera given and the scene has none")
    backend = backend or BvhBackend()
    seed = scene.seed if config.seed is None else config.seed
    threads = worker_count(config.threads)
    w, h = camera.width, camera.height
    n = w * h
    buf = np.zeros((n, 3), np.float64)
    timings = {"primary": 0.0, "light": 0.0, "visibility": 0.0, "shade": 0.0}
    inv_pi = 1.0 / math.pi

    for s in range(config.sample_offset, config.sample_offset + config.spp):
        t0 = time.perf_counter()
        data = sample_pass(scene, camera, s, seed, threads)
        t1 = time.perf_counter()
        hit = data["hit"]
        cos = np.einsum("ij,ij->i", data["normal"], data["ldir"])
        cast = hit & (cos > 0.0) & (data["pdf"] > 0.0) & (data["emit"].max(axis=1) > 0.0)
        t2 = time.perf_counter()
        vis = np.zeros(n, np.float64)
        if cast.any():
            rays = ShadowRays(
                np.ascontiguousarray(data["point"][cast]),
                np.ascontiguousarray(data["ldir"][cast]),
                np.ascontiguousarray(data["tmax"][cast]),
            )
            occ = backend.occluded(scene, rays, threads)
            vis[cast] = ~occ
        t3 = time.perf_counter()
        contrib = np.zeros((n, 3), np.float64)
        if cast.any():
            alb = scene.albedo[data["obj"][cast]]
            scale = (vis[cast] * cos[cast] / data["pdf"][cast])[:, None]
            contrib[cast] = alb * inv_pi * data["emit"][cast] * scale
        miss = ~hit
        if miss.any() and scene.environment is not None:
            contrib[miss] = env_radiance(scene.environment, data["pdir"][miss])
        buf += contrib
        t4 = time.perf_counter()
        timings["primary"] += t1 - t0
        timings["light"] += 0.0  # folded into the sample pass
        timings["visibility"] += t3 - t2
        timings["shade"] += t4 - t3

    img = HdrImage(buf.reshape(h, w, 3), config.spp)
    img.timings = timings
    return img


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------


def tonemap_srgb8(linear: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], gamma-encode, and quantize to bytes."""
    x = np.clip(np.asarray(linear, np.float64), 0.0, 1.0)
    return np.rint(np.power(x, GAMMA) * 255.0).astype(np.uint8)


def _as_linear(img) -> np.ndarray:
    if isinstance(img, HdrImage):
        return img.mean()
    return np.asarray(img, np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio over the tonemapped 8-bit images; identical
    inputs report infinity."""
    ta = tonemap_srgb8(_as_linear(a)).astype(np.float64)
    tb = tonemap_srgb8(_as_linear(b)).astype(np.float64)
    if ta.shape != tb.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((ta - tb) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(255.0 ** 2 / mse)


def error_image(a, b, amplify: float = 1.0) -> np.ndarray:
    """Tonemapped per-channel |a - b| * amplify as bytes."""
    diff = np.abs(_as_linear(a) - _as_linear(b)) * amplify
    return tonemap_srgb8(diff)
