"""Learned secondary-ray visibility.

Each object carries small trainable feature grids addressed by the
box-relative ray coordinates from :mod:`.geometry`; their interpolated
latents concatenate into the input of a dense network. Rays starting
outside an object's box use one network (position + direction grids), rays
starting inside use another that also sees a 1D radial-distance grid.
Training data comes from the very shadow rays the renderer would cast, with
per-object tree lookups as labels.

Inference runs through a row-sequential kernel so a query's output is
bit-identical however the batch around it is composed or permuted, which is
what makes renders reproducible across thread counts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from numba import njit

from .bvh import _k_label_geometry, _k_label_visible
from .geometry import InnerQuery, OuterQuery
from .grids import (
    AdamParams,
    FeatureGrid1D,
    FeatureGrid2D,
    accumulate_grad_1d_batch,
    accumulate_grad_2d_batch,
    adam_step,
    grid_bytes,
    init_grid_1d,
    init_grid_2d,
    lookup_1d,
    lookup_1d_batch,
    lookup_2d,
    lookup_2d_batch,
)
from .mlp import HIDDEN_SLOPE, Mlp, build_mlp, l2_loss
from .renderer import (
    PredictorBackend,
    QueryRecords,
    Scene,
    ShadowRays,
    gather_queries,
    run_banded,
    sample_pass,
    worker_count,
)

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class OuterConfig:
    """Network and grid sizes for rays that start outside the box."""

    hidden_layers: int = 2
    hidden_width: int = 64
    grid_resolution: int = 256
    grid_latents: int = 3
    batch_size: int = 2 ** 11

    @property
    def input_dim(self) -> int:
        return 2 * self.grid_latents


@dataclass
class InnerConfig:
    """Sizes for rays that start inside the box; adds the distance grid."""

    hidden_layers: int = 3
    hidden_width: int = 48
    grid_resolution: int = 128
    grid_latents: int = 5
    dist_resolution: int = 128
    dist_latents: int = 3
    batch_size: int = 2 ** 12

    @property
    def input_dim(self) -> int:
        return 2 * self.grid_latents + self.dist_latents


SHARING_MODES = ("shared", "per_object")
HEAD_MODES = ("occlusion", "geometry")


@dataclass
class NifConfig:
    outer: OuterConfig = field(default_factory=OuterConfig)
    inner: InnerConfig = field(default_factory=InnerConfig)
    learning_rate: float = 0.005
    adam: AdamParams = field(default_factory=AdamParams)
    epochs: int = 30
    sharing: str = "shared"
    head: str = "occlusion"
    seed: int = 0

    def __post_init__(self):
        for blk in (self.outer, self.inner):
            if blk.hidden_layers < 1 or blk.hidden_width < 1:
                raise ValueError("network depth and width must be at least 1")
            if blk.grid_resolution < 1 or blk.grid_latents < 1:
                raise ValueError("grid resolution and latent count must be at least 1")
            if blk.batch_size < 1:
                raise ValueError("batch size must be at least 1")
        if self.inner.dist_resolution < 1 or self.inner.dist_latents < 1:
            raise ValueError("distance grid sizes must be at least 1")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"sharing must be one of {SHARING_MODES}")
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}")
        if not (self.learning_rate > 0):
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epoch count cannot be negative")

    @property
    def head_dim(self) -> int:
        return 1 if self.head == "occlusion" else 4

    @property
    def head_activation(self) -> str:
        return "sigmoid" if self.head == "occlusion" else "identity"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam"] = {
            "learning_rate": self.adam.learning_rate,
            "beta1": self.adam.beta1,
            "beta2": self.adam.beta2,
            "epsilon": self.adam.epsilon,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "NifConfig":
        adam = d.get("adam", {})
        adam.pop("step_count", None)
        return NifConfig(
            outer=OuterConfig(**d["outer"]),
            inner=InnerConfig(**d["inner"]),
            learning_rate=d["learning_rate"],
            adam=AdamParams(**adam),
            epochs=d["epochs"],
            sharing=d["sharing"],
            head=d["head"],
            seed=d["seed"],
        )


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class ObjectGrids:
    outer_pos: FeatureGrid2D
    outer_dir: FeatureGrid2D
    inner_pos: FeatureGrid2D
    inner_dir: FeatureGrid2D
    inner_dist: FeatureGrid1D


class NifModel:
    """Per-object grids plus the outer/inner networks.

    With sharing="shared" a single weight set per network serves every
    object (grids stay per-object); with "per_object" each object has its
    own pair, so training one object can never move another's predictions.
    """

    def __init__(self, config: NifConfig, n_objects: int,
                 scene_diagonal: float = 1.0, dtype=np.float32):
        if n_objects < 1:
            raise ValueError("a model needs at least one object")
        self.config = config
        self.n_objects = n_objects
        self.scene_diagonal = float(scene_diagonal)
        self.dtype = np.dtype(dtype)

        root = np.random.SeedSequence(config.seed)
        mlp_ss, grid_ss = root.spawn(2)
        n_heads = 1 if config.sharing == "shared" else n_objects
        mlp_children = mlp_ss.spawn(2 * n_heads)
        self.outer_mlps: List[Mlp] = []
        self.inner_mlps: List[Mlp] = []
        for h in range(n_heads):
            self.outer_mlps.append(build_mlp(
                config.outer.input_dim, config.outer.hidden_layers,
                config.outer.hidden_width, config.head_dim,
                config.head_activation, seed=mlp_children[2 * h], dtype=dtype,
            ))
            self.inner_mlps.append(build_mlp(
                config.inner.input_dim, config.inner.hidden_layers,
                config.inner.hidden_width, config.head_dim,
                config.head_activation, seed=mlp_children[2 * h + 1], dtype=dtype,
            ))

        self.grids: List[ObjectGrids] = []
        for obj_ss in grid_ss.spawn(n_objects):
            s = obj_ss.spawn(5)
            self.grids.append(ObjectGrids(
                outer_pos=init_grid_2d(config.outer.grid_resolution,
                                       config.outer.grid_latents, s[0], dtype=dtype),
                outer_dir=init_grid_2d(config.outer.grid_resolution,
                                       config.outer.grid_latents, s[1], dtype=dtype),
                inner_pos=init_grid_2d(config.inner.grid_resolution,
                                       config.inner.grid_latents, s[2], dtype=dtype),
                inner_dir=init_grid_2d(config.inner.grid_resolution,
                                       config.inner.grid_latents, s[3], dtype=dtype),
                inner_dist=init_grid_1d(config.inner.dist_resolution,
                                        config.inner.dist_latents, s[4], dtype=dtype),
            ))
        self.set_learning_rate(config.learning_rate)

    def _check_object(self, object_id: int):
        if not (0 <= object_id < self.n_objects):
            raise ValueError(f"object {object_id} has no grids "
                             f"(model covers {self.n_objects})")

    def outer_mlp(self, object_id: int) -> Mlp:
        return self.outer_mlps[0 if self.config.sharing == "shared" else object_id]

    def inner_mlp(self, object_id: int) -> Mlp:
        return self.inner_mlps[0 if self.config.sharing == "shared" else object_id]

    def set_learning_rate(self, lr: float):
        a = self.config.adam
        for mlp in self.outer_mlps + self.inner_mlps:
            mlp.set_learning_rate(lr)
            for layer in mlp.layers:
                for p in (layer.adam_w, layer.adam_b):
                    p.beta1, p.beta2, p.epsilon = a.beta1, a.beta2, a.epsilon
        for g in self.grids:
            for grid in (g.outer_pos, g.outer_dir, g.inner_pos, g.inner_dir,
                         g.inner_dist):
                grid.adam = AdamParams(learning_rate=lr, beta1=a.beta1,
                                       beta2=a.beta2, epsilon=a.epsilon)

    def n_parameters(self) -> int:
        total = sum(m.n_parameters for m in self.outer_mlps + self.inner_mlps)
        for g in self.grids:
            total += sum(grid.latents.size for grid in
                         (g.outer_pos, g.outer_dir, g.inner_pos, g.inner_dir,
                          g.inner_dist))
        return total


def build_model(config: NifConfig, scene: Scene, dtype=np.float32) -> NifModel:
    return NifModel(config, scene.n_objects, scene.diagonal, dtype)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def encode_outer(model: NifModel, q: OuterQuery) -> np.ndarray:
    """Concatenated position/direction latents for one outside-ray query."""
    model._check_object(q.object_id)
    g = model.grids[q.object_id]
    vp = lookup_2d(g.outer_pos, (q.p_prime.u, q.p_prime.v))
    vd = lookup_2d(g.outer_dir, (q.d_prime.u, q.d_prime.v))
    return np.concatenate([vp, vd])


def encode_inner(model: NifModel, q: InnerQuery) -> np.ndarray:
    """Position, direction, and radial-distance latents for an inside ray."""
    model._check_object(q.object_id)
    g = model.grids[q.object_id]
    vp = lookup_2d(g.inner_pos, (q.p_prime.u, q.p_prime.v))
    vd = lookup_2d(g.inner_dir, (q.d_prime.u, q.d_prime.v))
    vr = lookup_1d(g.inner_dist, q.r_prime)
    return np.concatenate([vp, vd, vr])


def encode_outer_arrays(model: NifModel, obj: np.ndarray, coord: np.ndarray) -> np.ndarray:
    """Batched outer encoding; coord columns are (p_u, p_v, d_u, d_v)."""
    n_lat = model.config.outer.grid_latents
    out = np.empty((len(obj), 2 * n_lat), np.float64)
    for o in np.unique(obj):
        model._check_object(int(o))
        m = obj == o
        g = model.grids[int(o)]
        out[m, :n_lat] = lookup_2d_batch(g.outer_pos, coord[m, 0:2])
        out[m, n_lat:] = lookup_2d_batch(g.outer_dir, coord[m, 2:4])
    return out


def encode_inner_arrays(model: NifModel, obj: np.ndarray, coord: np.ndarray) -> np.ndarray:
    """Batched inner encoding; coord columns are (p_u, p_v, d_u, d_v, r)."""
    n_lat = model.config.inner.grid_latents
    n_dist = model.config.inner.dist_latents
    out = np.empty((len(obj), 2 * n_lat + n_dist), np.float64)
    for o in np.unique(obj):
        model._check_object(int(o))
        m = obj == o
        g = model.grids[int(o)]
        out[m, :n_lat] = lookup_2d_batch(g.inner_pos, coord[m, 0:2])
        out[m, n_lat:2 * n_lat] = lookup_2d_batch(g.inner_dir, coord[m, 2:4])
        out[m, 2 * n_lat:] = lookup_1d_batch(g.inner_dist, coord[m, 4])
    return out


# ---------------------------------------------------------------------------
# row-sequential forward pass (batch-order independent by construction)
# ---------------------------------------------------------------------------

_SLOPE = float(HIDDEN_SLOPE)


@njit(cache=True, nogil=True)
def _k_dense_forward(w_flat, b_flat, dims, sigmoid_head, x, out, j0, j1):
    md = 0
    for d in dims:
        if d > md:
            md = d
    bufa = np.empty(md, np.float64)
    bufb = np.empty(md, np.float64)
    nl = len(dims) - 1
    for j in range(j0, j1):
        for k in range(dims[0]):
            bufa[k] = x[j, k]
        wo = 0
        bo = 0
        for layer in range(nl):
            nin = dims[layer]
            nout = dims[layer + 1]
            for o in range(nout):
                acc = float(b_flat[bo + o])
                base = wo + o * nin
                for k in range(nin):
                    acc += w_flat[base + k] * bufa[k]
                if layer < nl - 1:
                    bufb[o] = acc if acc > 0.0 else _SLOPE * acc
                elif sigmoid_head == 1:
                    if acc >= 0.0:
                        bufb[o] = 1.0 / (1.0 + math.exp(-acc))
                    else:
                        e = math.exp(acc)
                        bufb[o] = e / (1.0 + e)
                else:
                    bufb[o] = acc
            wo += nin * nout
            bo += nout
            tmp = bufa
            bufa = bufb
            bufb = tmp
        for k in range(dims[nl]):
            out[j, k] = bufa[k]


def _flat_mlp(mlp: Mlp):
    w = np.concatenate([np.ascontiguousarray(l.w, np.float32).reshape(-1)
                        for l in mlp.layers])
    b = np.concatenate([np.asarray(l.b, np.float32) for l in mlp.layers])
    dims = np.asarray(mlp.dims, np.int64)
    return w, b, dims


def _forward_rows(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    out = np.empty((len(x), mlp.output_dim), np.float64)
    if len(x):
        w, b, dims = _flat_mlp(mlp)
        head = 1 if mlp.output_activation == "sigmoid" else 0
        _k_dense_forward(w, b, dims, head, np.ascontiguousarray(x, np.float64),
                         out, 0, len(x))
    return out


def forward_outer_arrays(model: NifModel, obj: np.ndarray, x: np.ndarray) -> np.ndarray:
    if model.config.sharing == "shared":
        return _forward_rows(model.outer_mlps[0], x)
    out = np.empty((len(obj), model.config.head_dim), np.float64)
    for o in np.unique(obj):
        m = obj == o
        out[m] = _forward_rows(model.outer_mlp(int(o)), x[m])
    return out


def forward_inner_arrays(model: NifModel, obj: np.ndarray, x: np.ndarray) -> np.ndarray:
    if model.config.sharing == "shared":
        return _forward_rows(model.inner_mlps[0], x)
    out = np.empty((len(obj), model.config.head_dim), np.float64)
    for o in np.unique(obj):
        m = obj == o
        out[m] = _forward_rows(model.inner_mlp(int(o)), x[m])
    return out


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _split_queries(queries: Sequence[Union[OuterQuery, InnerQuery]]):
    o_idx, o_obj, o_coord = [], [], []
    i_idx, i_obj, i_coord = [], [], []
    for j, q in enumerate(queries):
        if isinstance(q, InnerQuery):
            i_idx.append(j)
            i_obj.append(q.object_id)
            i_coord.append((q.p_prime.u, q.p_prime.v, q.d_prime.u, q.d_prime.v,
                            q.r_prime))
        elif isinstance(q, OuterQuery):
            o_idx.append(j)
            o_obj.append(q.object_id)
            o_coord.append((q.p_prime.u, q.p_prime.v, q.d_prime.u, q.d_prime.v))
        else:
            raise TypeError(f"not a ray query: {type(q).__name__}")
    return (
        np.asarray(o_idx, np.int64), np.asarray(o_obj, np.int64),
        np.asarray(o_coord, np.float64).reshape(-1, 4),
        np.asarray(i_idx, np.int64), np.asarray(i_obj, np.int64),
        np.asarray(i_coord, np.float64).reshape(-1, 5),
    )


def infer_occlusion(model: NifModel, queries) -> np.ndarray:
    """Boolean per query, True = occluded (probability below one half;
    exactly one half counts as clear). The outer batch runs first, then the
    inner batch; results land back in query order."""
    if model.config.head != "occlusion":
        raise ValueError("model was built with the geometry head")
    o_idx, o_obj, o_coord, i_idx, i_obj, i_coord = _split_queries(queries)
    out = np.zeros(len(queries), bool)
    if len(o_idx):
        p = forward_outer_arrays(model, o_obj, encode_outer_arrays(model, o_obj, o_coord))
        out[o_idx] = p[:, 0] < 0.5
    if len(i_idx):
        p = forward_inner_arrays(model, i_obj, encode_inner_arrays(model, i_obj, i_coord))
        out[i_idx] = p[:, 0] < 0.5
    return out


def infer_geometry(model: NifModel, queries):
    """(unit normal, depth) per query; depth is rescaled by the scene
    diagonal the model was built against."""
    if model.config.head != "geometry":
        raise ValueError("model was built with the occlusion head")
    o_idx, o_obj, o_coord, i_idx, i_obj, i_coord = _split_queries(queries)
    raw = np.zeros((len(queries), 4), np.float64)
    if len(o_idx):
        raw[o_idx] = forward_outer_arrays(
            model, o_obj, encode_outer_arrays(model, o_obj, o_coord))
    if len(i_idx):
        raw[i_idx] = forward_inner_arrays(
            model, i_obj, encode_inner_arrays(model, i_obj, i_coord))
    normals = raw[:, 0:3]
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-20
    normals = np.where(ok[:, None], normals / np.maximum(norms, 1e-300)[:, None],
                       np.array([0.0, 0.0, 1.0]))
    depth = raw[:, 3] * model.scene_diagonal
    return normals, depth


def infer_records(model: NifModel, records: QueryRecords) -> np.ndarray:
    """Occlusion bits for gathered (ray, object) records; the array twin of
    infer_occlusion used inside the render pass."""
    if model.config.head != "occlusion":
        raise ValueError("model was built with the geometry head")
    occ = np.zeros(len(records), bool)
    om = records.kind == 0
    if om.any():
        obj = records.obj[om].astype(np.int64)
        x = encode_outer_arrays(model, obj, records.coord[om, 0:4])
        occ[om] = forward_outer_arrays(model, obj, x)[:, 0] < 0.5
    im = records.kind == 1
    if im.any():
        obj = records.obj[im].astype(np.int64)
        x = encode_inner_arrays(model, obj, records.coord[im, 0:5])
        occ[im] = forward_inner_arrays(model, obj, x)[:, 0] < 0.5
    return occ


class NifBackend(PredictorBackend):
    """Visibility from the learned model, optionally hybrid: objects under
    the triangle threshold keep answering from their own trees."""

    def __init__(self, model: NifModel, hybrid_threshold: Optional[int] = None):
        if model is None:
            raise ValueError("the learned backend needs a model")
        self.model = model

        def predict(scene, records, rays, threads=1):
            return infer_records(model, records)

        super().__init__(predict, hybrid_threshold)
        self.name = "nif" if hybrid_threshold is None else "hybrid"


# ---------------------------------------------------------------------------
# sample collection
# ---------------------------------------------------------------------------


@dataclass
class SampleSet:
    """Flat training data: one row per (shadow ray, overlapped object)."""

    head: str
    outer_obj: np.ndarray    # (n,) int64
    outer_coord: np.ndarray  # (n, 4) float64
    outer_label: np.ndarray  # (n,) or (n, 4) float32
    outer_ray: np.ndarray    # (n,) int64 global ray id
    inner_obj: np.ndarray
    inner_coord: np.ndarray  # (m, 5)
    inner_label: np.ndarray
    inner_ray: np.ndarray
    n_rays: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def n_outer(self) -> int:
        return len(self.outer_obj)

    @property
    def n_inner(self) -> int:
        return len(self.inner_obj)


def _label_occlusion(scene: Scene, records: QueryRecords, rays: ShadowRays,
                     threads: int) -> np.ndarray:
    vis = np.zeros(len(records), np.uint8)

    def band(b, j0, j1):
        _k_label_visible(
            *scene.pack.bottom_args(),
            records.obj, records.ray, rays.origins, rays.dirs, rays.tmaxs,
            j0, j1, scene.epsilon_t, vis,
        )

    run_banded(band, len(records), threads)
    return vis.astype(np.float32)


def _label_geometry(scene: Scene, records: QueryRecords, rays: ShadowRays,
                    threads: int):
    n = len(records)
    hit = np.zeros(n, np.uint8)
    normal = np.zeros((n, 3), np.float64)
    t = np.zeros(n, np.float64)
    pk = scene.pack

    def band(b, j0, j1):
        _k_label_geometry(
            pk.roots, pk.b_lo, pk.b_hi, pk.b_a, pk.b_b, pk.b_leaf,
            pk.v0, pk.v1, pk.v2, pk.n0, pk.n1, pk.n2,
            records.obj, records.ray, rays.origins, rays.dirs,
            j0, j1, scene.epsilon_t, hit, normal, t,
        )

    run_banded(band, n, threads)
    labels = np.concatenate(
        [normal, (t / scene.diagonal)[:, None]], axis=1).astype(np.float32)
    return labels, hit.astype(bool)


def collect_samples(scene: Scene, camera=None, spp: int = 4,
                    sampler: str = "importance", labeler=None,
                    seed: Optional[int] = None,
                    threads: Optional[int] = None) -> SampleSet:
    """Harvest training rows from the first spp samples of each pixel.

    Occlusion labels follow the shadow ray of each pixel sample: every
    object whose box the ray enters from outside contributes one outer row,
    every box containing the ray origin one inner row, each labeled by that
    object's own tree. The geometry labeler instead follows the primary
    rays and keeps the rows whose object is actually hit.

    labeler may be None (occlusion), the string "geometry", or a callable
    (scene, records, rays, threads) -> labels or (labels, keep_mask).
    """
    camera = camera or scene.camera
    if camera is None:
        raise ValueError("no camera given and the scene has none")
    if sampler not in ("importance", "uniform"):
        raise ValueError(f"unknown sampler {sampler!r}")
    head = "geometry" if labeler == "geometry" else "occlusion"
    if head == "occlusion" and labeler is None and not scene.lights \
            and scene.environment is None:
        raise ValueError("sample collection needs at least one light")
    threads = worker_count(threads)
    seed = scene.seed if seed is None else seed
    route = scene.nif_enabled.copy()
    n_pix = camera.width * camera.height

    acc = {k: [] for k in ("oo", "oc", "ol", "or_", "io", "ic", "il", "ir")}
    n_rays = 0
    shadow_rays = 0
    degenerate = 0
    cam_pos = np.ascontiguousarray(
        np.broadcast_to(camera.position, (n_pix, 3)), np.float64)
    inf_tmax = np.full(n_pix, np.inf)

    for s in range(spp):
        pass_sampler = "uniform" if head == "geometry" else sampler
        data = sample_pass(scene, camera, s, seed, threads, sampler=pass_sampler)
        if head == "geometry":
            rays = ShadowRays(cam_pos, np.ascontiguousarray(data["pdir"]), inf_tmax)
            ray_ids = s * n_pix + np.arange(n_pix, dtype=np.int64)
        else:
            mask = data["hit"]
            rays = ShadowRays(
                np.ascontiguousarray(data["point"][mask]),
                np.ascontiguousarray(data["ldir"][mask]),
                np.ascontiguousarray(data["tmax"][mask]),
            )
            ray_ids = s * n_pix + np.nonzero(mask)[0].astype(np.int64)
        if len(rays) == 0:
            continue
        records, _ = gather_queries(scene, rays, route, threads)
        shadow_rays += len(rays)
        degenerate += records.degenerate_count
        if len(records) == 0:
            continue

        if head == "geometry":
            labels, keep = _label_geometry(scene, records, rays, threads)
        elif labeler is None:
            labels = _label_occlusion(scene, records, rays, threads)
            keep = np.ones(len(records), bool)
        else:
            got = labeler(scene, records, rays, threads)
            labels, keep = got if isinstance(got, tuple) else (got, np.ones(len(records), bool))
            labels = np.asarray(labels, np.float32)

        for kind, (ko, kc, kl, kr), width in ((0, ("oo", "oc", "ol", "or_"), 4),
                                              (1, ("io", "ic", "il", "ir"), 5)):
            m = (records.kind == kind) & keep
            if not m.any():
                continue
            acc[ko].append(records.obj[m].astype(np.int64))
            acc[kc].append(records.coord[m, :width].copy())
            acc[kl].append(labels[m])
            acc[kr].append(ray_ids[records.ray[m]])
        n_rays += len(rays)

    def cat(key, shape_tail, dt):
        if acc[key]:
            return np.concatenate(acc[key])
        return np.zeros((0,) + shape_tail, dt)

    label_tail = () if head == "occlusion" else (4,)
    out = SampleSet(
        head=head,
        outer_obj=cat("oo", (), np.int64),
        outer_coord=cat("oc", (4,), np.float64),
        outer_label=cat("ol", label_tail, np.float32),
        outer_ray=cat("or_", (), np.int64),
        inner_obj=cat("io", (), np.int64),
        inner_coord=cat("ic", (5,), np.float64),
        inner_label=cat("il", label_tail, np.float32),
        inner_ray=cat("ir", (), np.int64),
        n_rays=n_rays,
    )
    out.stats = {
        "pixel_samples": spp * n_pix,
        "shadow_rays": shadow_rays,
        "degenerate_queries": degenerate,
        "outer_per_object": np.bincount(out.outer_obj, minlength=scene.n_objects),
        "inner_per_object": np.bincount(out.inner_obj, minlength=scene.n_objects),
    }
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _train_batch(model: NifModel, which: str, obj: np.ndarray,
                 coord: np.ndarray, label: np.ndarray) -> float:
    """One joint optimizer step over a mini-batch; returns its mean loss."""
    cfg = model.config
    order = np.argsort(obj, kind="stable")
    obj = obj[order]
    coord = coord[order]
    label = label[order]
    bounds = np.flatnonzero(np.diff(obj)) + 1
    starts = np.concatenate([[0], bounds])
    stops = np.concatenate([bounds, [len(obj)]])

    total = 0.0
    touched = []
    for a, b in zip(starts, stops):
        o = int(obj[a])
        g = model.grids[o]
        touched.append(o)
        if which == "outer":
            n_lat = cfg.outer.grid_latents
            uv_p = coord[a:b, 0:2]
            uv_d = coord[a:b, 2:4]
            x = np.concatenate([
                lookup_2d_batch(g.outer_pos, uv_p),
                lookup_2d_batch(g.outer_dir, uv_d),
            ], axis=1).astype(model.dtype)
            mlp = model.outer_mlp(o)
        else:
            n_lat = cfg.inner.grid_latents
            uv_p = coord[a:b, 0:2]
            uv_d = coord[a:b, 2:4]
            r = coord[a:b, 4]
            x = np.concatenate([
                lookup_2d_batch(g.inner_pos, uv_p),
                lookup_2d_batch(g.inner_dir, uv_d),
                lookup_1d_batch(g.inner_dist, r),
            ], axis=1).astype(model.dtype)
            mlp = model.inner_mlp(o)
        tgt = label[a:b]
        if tgt.ndim == 1:
            tgt = tgt[:, None]
        pred = mlp.forward(x)
        loss, gout = l2_loss(pred, tgt.astype(pred.dtype))
        gx = mlp.backward(gout)
        if which == "outer":
            accumulate_grad_2d_batch(g.outer_pos, uv_p, gx[:, :n_lat])
            accumulate_grad_2d_batch(g.outer_dir, uv_d, gx[:, n_lat:2 * n_lat])
        else:
            accumulate_grad_2d_batch(g.inner_pos, uv_p, gx[:, :n_lat])
            accumulate_grad_2d_batch(g.inner_dir, uv_d, gx[:, n_lat:2 * n_lat])
            accumulate_grad_1d_batch(g.inner_dist, r, gx[:, 2 * n_lat:])
        total += loss * (b - a)

    stepped = set()
    for o in touched:
        g = model.grids[o]
        if which == "outer":
            adam_step(g.outer_pos)
            adam_step(g.outer_dir)
        else:
            adam_step(g.inner_pos)
            adam_step(g.inner_dir)
            adam_step(g.inner_dist)
        mlp = model.outer_mlp(o) if which == "outer" else model.inner_mlp(o)
        if id(mlp) not in stepped:
            mlp.adam_step()
            stepped.add(id(mlp))
    return total / len(obj)


def train(model: NifModel, samples: SampleSet, epochs: Optional[int] = None,
          seed: Optional[int] = None) -> np.ndarray:
    """Shuffled mini-batch epochs over both query families.

    Returns the loss curve as an (epochs, 3) array with columns
    (outer, inner, combined); a family with no samples reports NaN.
    """
    if samples.head != model.config.head:
        raise ValueError(f"sample head {samples.head!r} does not match the "
                         f"model head {model.config.head!r}")
    if samples.n_outer == 0 and samples.n_inner == 0:
        raise ValueError("no training samples")
    epochs = model.config.epochs if epochs is None else epochs
    seed = model.config.seed if seed is None else seed
    curve = np.zeros((epochs, 3))
    if epochs == 0:
        return curve
    epoch_ss = np.random.SeedSequence([seed, 0x7472]).spawn(epochs)
    bo = model.config.outer.batch_size
    bi = model.config.inner.batch_size

    for e in range(epochs):
        rng = np.random.default_rng(epoch_ss[e])
        sums = np.zeros(2)
        counts = np.zeros(2, np.int64)
        for fam, bs, (obj, coord, label) in (
            (0, bo, (samples.outer_obj, samples.outer_coord, samples.outer_label)),
            (1, bi, (samples.inner_obj, samples.inner_coord, samples.inner_label)),
        ):
            n = len(obj)
            if n == 0:
                continue
            perm = rng.permutation(n)
            which = "outer" if fam == 0 else "inner"
            for k in range(0, n, bs):
                idx = perm[k:k + bs]
                loss = _train_batch(model, which, obj[idx], coord[idx], label[idx])
                sums[fam] += loss * len(idx)
                counts[fam] += len(idx)
        outer_mean = sums[0] / counts[0] if counts[0] else math.nan
        inner_mean = sums[1] / counts[1] if counts[1] else math.nan
        combined = sums.sum() / counts.sum()
        curve[e] = (outer_mean, inner_mean, combined)
    return curve


# ---------------------------------------------------------------------------
# byte accounting
# ---------------------------------------------------------------------------


def published_kb(nbytes: int) -> int:
    """Kilobyte figure matching the published accounting: whole binary kB
    when the byte count divides evenly, floor-decimal otherwise."""
    if nbytes % 1024 == 0:
        return nbytes // 1024
    return nbytes // 1000


def memory_report(config: NifConfig, n_objects: int = 1) -> dict:
    """Grid storage per the published formulas (not our allocation sizes)."""
    ro = config.outer.grid_resolution
    ri = config.inner.grid_resolution
    rd = config.inner.dist_resolution
    outer_rt = grid_bytes(ro, 2, training=False)
    outer_tr = 2 * grid_bytes(ro, 2, training=True)
    inner_rt = grid_bytes(ri, 2, training=False) + grid_bytes(rd, 1, training=False)
    inner_tr = 2 * grid_bytes(ri, 2, training=True) + grid_bytes(rd, 1, training=True)

    def mlp_params(in_dim, layers, width, out_dim):
        dims = [in_dim] + [width] * layers + [out_dim]
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

    return {
        "outer": {
            "runtime_bytes": outer_rt,
            "runtime_kb": published_kb(outer_rt),
            "training_bytes": outer_tr,
        },
        "inner": {
            "runtime_bytes": inner_rt,
            "runtime_kb": published_kb(inner_rt),
            "training_bytes": inner_tr,
        },
        "per_object_runtime_bytes": outer_rt + inner_rt,
        "total_runtime_bytes": n_objects * (outer_rt + inner_rt),
        "mlp_parameters": {
            "outer": mlp_params(config.outer.input_dim, config.outer.hidden_layers,
                                config.outer.hidden_width, config.head_dim),
            "inner": mlp_params(config.inner.input_dim, config.inner.hidden_layers,
                                config.inner.hidden_width, config.head_dim),
        },
    }
