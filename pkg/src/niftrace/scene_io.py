"""Serialization: meshes, scene descriptions, images, model checkpoints,
and benchmark/loss reports.

Scene files are JSON with the key names documented in the README. Images
go out as tonemapped 8-bit PNG or raw little-endian PFM; PFM is the format
the determinism guarantees are stated against. Checkpoints are a small
binary container (magic "NIF1") holding the config echo as JSON plus every
weight array as little-endian float32 with explicit shapes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .bvh import build_bottom, triangles_to_arrays
from .geometry import Triangle, vec3
from .nif import NifConfig, NifModel
from .renderer import (
    AreaLight,
    Camera,
    EnvironmentLight,
    HdrImage,
    PointLight,
    Scene,
    SceneObject,
    tonemap_srgb8,
)


class SceneFormatError(ValueError):
    """A scene or mesh file that cannot be parsed."""


# ---------------------------------------------------------------------------
# OBJ meshes
# ---------------------------------------------------------------------------


def _parse_face_corner(token: str, n_verts: int, n_normals: int,
                       path: str, lineno: int) -> Tuple[int, Optional[int]]:
    fields = token.split("/")
    try:
        vi = int(fields[0])
        ni = None
        if len(fields) == 3 and fields[2]:
            ni = int(fields[2])
    except ValueError:
        raise SceneFormatError(f"{path}:{lineno}: bad face corner {token!r}")
    if vi == 0 or (ni is not None and ni == 0):
        raise SceneFormatError(f"{path}:{lineno}: OBJ indices are 1-based")
    vi = vi - 1 if vi > 0 else n_verts + vi
    if not (0 <= vi < n_verts):
        raise SceneFormatError(f"{path}:{lineno}: vertex index out of range")
    if ni is not None:
        ni = ni - 1 if ni > 0 else n_normals + ni
        if not (0 <= ni < n_normals):
            raise SceneFormatError(f"{path}:{lineno}: normal index out of range")
    return vi, ni


def load_obj(path) -> Tuple[List[Triangle], int]:
    """Triangles from v / vn / f records; polygons are fan-triangulated.

    Returns (triangles, dropped) where dropped counts zero-area faces that
    were discarded. Corners without normals fall back to the geometric one.
    """
    path = Path(path)
    verts: List[np.ndarray] = []
    normals: List[np.ndarray] = []
    tris: List[Triangle] = []
    dropped = 0
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise SceneFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append(vec3(float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError:
                    raise SceneFormatError(f"{path}:{lineno}: bad vertex coordinate")
            elif tag == "vn":
                if len(parts) < 4:
                    raise SceneFormatError(f"{path}:{lineno}: normal needs 3 components")
                try:
                    normals.append(vec3(float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError:
                    raise SceneFormatError(f"{path}:{lineno}: bad normal component")
            elif tag == "f":
                corners = [
                    _parse_face_corner(t, len(verts), len(normals), str(path), lineno)
                    for t in parts[1:]
                ]
                if len(corners) < 3:
                    raise SceneFormatError(f"{path}:{lineno}: face needs at least 3 corners")
                for k in range(1, len(corners) - 1):
                    trio = (corners[0], corners[k], corners[k + 1])
                    vs = [verts[vi] for vi, _ in trio]
                    ns = [None if ni is None else normals[ni] for _, ni in trio]
                    try:
                        tris.append(Triangle.from_vertices(*vs, *ns))
                    except ValueError:
                        dropped += 1
            # anything else (o, g, s, usemtl, mtllib, vt, ...) is ignored
    return tris, dropped


def write_obj(path, vertices: np.ndarray, faces: np.ndarray,
              normals: Optional[np.ndarray] = None):
    """Minimal OBJ writer; faces index vertices (and normals) 0-based."""
    path = Path(path)
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if normals is not None:
            for n in normals:
                fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
            for f in faces:
                fh.write("f {0}//{0} {1}//{1} {2}//{2}\n".format(
                    f[0] + 1, f[1] + 1, f[2] + 1))
        else:
            for f in faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# scene descriptions
# ---------------------------------------------------------------------------


def _vec(d, key, default=None):
    if key not in d:
        if default is None:
            raise SceneFormatError(f"scene is missing {key!r}")
        return vec3(*default)
    v = d[key]
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise SceneFormatError(f"{key!r} must be a 3-element list")
    return vec3(*[float(x) for x in v])


def _load_camera(d: dict) -> Camera:
    fov = float(d.get("vertical_fov", 45.0))
    if not (0.0 < fov < 180.0):
        raise SceneFormatError("vertical_fov must be inside (0, 180) degrees")
    return Camera(
        position=_vec(d, "position"),
        look_at=_vec(d, "look_at"),
        up=_vec(d, "up", (0.0, 0.0, 1.0)),
        vertical_fov=fov,
        width=int(d.get("width", 512)),
        height=int(d.get("height", 288)),
    )


def _load_light(d: dict):
    kind = d.get("kind")
    if kind == "point":
        return PointLight(position=_vec(d, "position"),
                          intensity=_vec(d, "intensity"))
    if kind == "area":
        corners = d.get("corners")
        if not isinstance(corners, list) or len(corners) != 4:
            raise SceneFormatError("area light needs exactly 4 corners")
        return AreaLight.from_corners(corners, d.get("radiance", (1.0, 1.0, 1.0)))
    raise SceneFormatError(f"unknown light kind {kind!r}")


def load_scene(path) -> Scene:
    """Build a renderable scene from a JSON description; mesh and map paths
    resolve relative to the scene file."""
    path = Path(path)
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{path}: invalid JSON ({e})") from e
    base = path.parent

    objects = []
    for i, od in enumerate(d.get("objects", [])):
        if "mesh_path" not in od:
            raise SceneFormatError(f"object {i} is missing mesh_path")
        tris, _dropped = load_obj(base / od["mesh_path"])
        if not tris:
            raise SceneFormatError(f"object {i}: mesh has no usable triangles")
        scale = float(od.get("scale", 1.0))
        if not (scale > 0):
            raise SceneFormatError(f"object {i}: scale must be positive")
        translate = _vec(od, "translate", (0.0, 0.0, 0.0))
        v0, v1, v2, n0, n1, n2 = triangles_to_arrays(tris)
        v0 = v0 * scale + translate
        v1 = v1 * scale + translate
        v2 = v2 * scale + translate
        objects.append(SceneObject(
            name=od.get("name", Path(od["mesh_path"]).stem),
            bvh=build_bottom((v0, v1, v2, n0, n1, n2)),
            albedo=_vec(od, "albedo", (0.7, 0.7, 0.7)),
            nif_enabled=bool(od.get("nif_enabled", True)),
        ))

    lights = [_load_light(ld) for ld in d.get("lights", [])]
    environment = None
    if d.get("environment"):
        img = read_pfm(base / d["environment"])
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        environment = EnvironmentLight(np.asarray(img, np.float64))

    if "camera" not in d:
        raise SceneFormatError("scene is missing the camera block")
    return Scene(
        objects=objects,
        lights=lights,
        camera=_load_camera(d["camera"]),
        seed=int(d.get("seed", 0)),
        environment=environment,
    )


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def write_pfm(path, img: np.ndarray):
    """Color PFM, little-endian, bottom-up scanlines (scale -1.0)."""
    img = np.asarray(img, np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PFM writer expects an (H, W, 3) image")
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Reads PF (color) and Pf (grayscale) files, honoring the scale sign
    for byte order. Returns float32, top-down."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise SceneFormatError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise SceneFormatError(f"{path}: bad PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        n_chan = 3 if magic == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * n_chan * 4), dt)
        if data.size != w * h * n_chan:
            raise SceneFormatError(f"{path}: truncated PFM payload")
    img = data.reshape(h, w, n_chan) if n_chan == 3 else data.reshape(h, w)
    return np.flipud(img).astype(np.float32)


def write_png8(path, linear: np.ndarray):
    Image.fromarray(tonemap_srgb8(linear), "RGB").save(path)


def _linear_of(img) -> np.ndarray:
    return img.mean() if isinstance(img, HdrImage) else np.asarray(img, np.float64)


def save_image(img, path, format: Optional[str] = None):
    """format: "png8" or "pfm"; inferred from the extension when omitted."""
    path = Path(path)
    if format is None:
        ext = path.suffix.lower()
        format = {"": "png8", ".png": "png8", ".pfm": "pfm"}.get(ext)
        if format is None:
            raise ValueError(f"cannot infer an image format from {path.suffix!r}")
    linear = _linear_of(img)
    if format == "png8":
        write_png8(path, linear)
    elif format == "pfm":
        write_pfm(path, linear)
    else:
        raise ValueError(f"unknown image format {format!r}")


def load_image(path) -> np.ndarray:
    """Linear image back from disk; PNG bytes are de-gamma'd to linear."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    arr = np.asarray(Image.open(path).convert("RGB"), np.float64) / 255.0
    return np.power(arr, 2.2)


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NIF1"
CHECKPOINT_VERSION = 1


def _model_arrays(model: NifModel):
    """Deterministic array order shared by save and load."""
    for mlp in model.outer_mlps + model.inner_mlps:
        for layer in mlp.layers:
            yield layer.w
            yield layer.b
    for g in model.grids:
        yield g.outer_pos.latents
        yield g.outer_dir.latents
        yield g.inner_pos.latents
        yield g.inner_dir.latents
        yield g.inner_dist.latents


def save_checkpoint(model: NifModel, path):
    meta = {
        "config": model.config.to_dict(),
        "n_objects": model.n_objects,
        "scene_diagonal": model.scene_diagonal,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in _model_arrays(model):
            a = np.ascontiguousarray(arr, "<f4")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def _read_exact(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise SceneFormatError(f"{path}: truncated checkpoint")
    return data


def load_checkpoint(path, into: Optional[NifModel] = None) -> NifModel:
    """Rebuild a model from disk. With `into`, the file must echo that
    model's configuration exactly and the weights load in place."""
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != CHECKPOINT_MAGIC:
            raise SceneFormatError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != CHECKPOINT_VERSION:
            raise SceneFormatError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        meta = json.loads(_read_exact(fh, blob_len, path))
        config = NifConfig.from_dict(meta["config"])
        if into is not None:
            if into.config.to_dict() != config.to_dict() \
                    or into.n_objects != meta["n_objects"]:
                raise SceneFormatError(
                    f"{path}: checkpoint configuration does not match the model")
            model = into
            model.scene_diagonal = float(meta["scene_diagonal"])
        else:
            model = NifModel(config, meta["n_objects"],
                             meta["scene_diagonal"], dtype=np.float32)
        for arr in _model_arrays(model):
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path))
            if shape != arr.shape:
                raise SceneFormatError(
                    f"{path}: stored array shape {shape} does not match {arr.shape}")
            count = int(np.prod(shape))
            data = np.frombuffer(_read_exact(fh, 4 * count, path), "<f4")
            arr[...] = data.reshape(shape).astype(arr.dtype)
        extra = fh.read(1)
        if extra:
            raise SceneFormatError(f"{path}: trailing bytes after checkpoint payload")
    return model


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

BENCH_COLUMNS = [
    "scene", "triangles", "shadow_rays", "outer_rays", "inner_rays",
    "bvh_ray_cast_us", "nif_ray_cast_us", "outer_grid_us",
    "outer_inference_us", "inner_grid_us", "inner_inference_us",
    "nif_total_us", "speedup",
]


@dataclass
class BenchRow:
    scene: str
    triangles: int
    shadow_rays: int
    outer_rays: int
    inner_rays: int
    bvh_ray_cast_us: float
    nif_ray_cast_us: float
    outer_grid_us: float
    outer_inference_us: float
    inner_grid_us: float
    inner_inference_us: float
    nif_total_us: float
    speedup: float


def write_bench_csv(rows: Sequence[BenchRow], path):
    with open(path, "w") as fh:
        fh.write(",".join(BENCH_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(str(getattr(r, c)) for c in BENCH_COLUMNS) + "\n")


def read_bench_csv(path) -> List[BenchRow]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != BENCH_COLUMNS:
            raise SceneFormatError(f"{path}: unexpected benchmark header")
        rows = []
        for line in fh:
            if not line.strip():
                continue
            vals = line.strip().split(",")
            rows.append(BenchRow(
                scene=vals[0],
                triangles=int(vals[1]),
                shadow_rays=int(vals[2]),
                outer_rays=int(vals[3]),
                inner_rays=int(vals[4]),
                bvh_ray_cast_us=float(vals[5]),
                nif_ray_cast_us=float(vals[6]),
                outer_grid_us=float(vals[7]),
                outer_inference_us=float(vals[8]),
                inner_grid_us=float(vals[9]),
                inner_inference_us=float(vals[10]),
                nif_total_us=float(vals[11]),
                speedup=float(vals[12]),
            ))
    return rows


def write_loss_csv(curve: np.ndarray, path):
    """Per-epoch loss columns as produced by the trainer."""
    with open(path, "w") as fh:
        fh.write("epoch,outer_loss,inner_loss,total_loss\n")
        for e, (o, i, t) in enumerate(np.atleast_2d(curve)):
            fh.write(f"{e},{float(o)!r},{float(i)!r},{float(t)!r}\n")
