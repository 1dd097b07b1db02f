"""Command-line driver: render, train, eval, bench, and sweep.

Every command is deterministic for a fixed --seed (timing output aside).
NIF_THREADS caps the worker pool; 0 or unset means every core.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .nif import (
    NifBackend,
    NifConfig,
    build_model,
    collect_samples,
    encode_inner_arrays,
    encode_outer_arrays,
    forward_inner_arrays,
    forward_outer_arrays,
    memory_report,
    train,
)
from .renderer import (
    DEFAULT_TRI_THRESHOLD,
    BvhBackend,
    RenderConfig,
    ShadowRays,
    error_image,
    gather_queries,
    psnr,
    render,
    sample_pass,
    worker_count,
)
from .scene_io import (
    BenchRow,
    load_checkpoint,
    load_image,
    load_scene,
    save_checkpoint,
    save_image,
    write_bench_csv,
    write_loss_csv,
)


def _parse_res(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 512x288, got {text!r}")


def _apply_res(scene, res):
    if res is not None:
        scene.camera = replace(scene.camera, width=res[0], height=res[1])
    return scene


def _out_pair(out: str):
    base = Path(out)
    if base.suffix.lower() in (".png", ".pfm"):
        base = base.with_suffix("")
    return base.with_suffix(".png"), base.with_suffix(".pfm")


def cmd_render(args) -> int:
    scene = _apply_res(load_scene(args.scene), args.res)
    if args.seed is not None:
        scene.seed = args.seed
    if args.backend == "bvh":
        backend = BvhBackend()
    else:
        model = load_checkpoint(args.model)
        if model.n_objects != scene.n_objects:
            raise ValueError(
                f"model covers {model.n_objects} objects, scene has {scene.n_objects}")
        threshold = args.threshold if args.backend == "hybrid" else None
        backend = NifBackend(model, threshold)
    t0 = time.perf_counter()
    img = render(scene, config=RenderConfig(spp=args.spp), backend=backend)
    total = time.perf_counter() - t0
    png_path, pfm_path = _out_pair(args.out)
    save_image(img, png_path, "png8")
    save_image(img, pfm_path, "pfm")
    for stage in ("primary", "visibility", "shade"):
        print(f"[render] {stage:<10} {img.timings.get(stage, 0.0):8.3f} s")
    print(f"[render] {'total':<10} {total:8.3f} s")
    print(f"wrote {png_path} and {pfm_path}")
    return 0


def _config_from_args(args) -> NifConfig:
    cfg = NifConfig()
    if getattr(args, "grid_res", None):
        cfg.outer.grid_resolution = args.grid_res
        cfg.inner.grid_resolution = args.grid_res
        cfg.inner.dist_resolution = args.grid_res
    if getattr(args, "lr", None):
        cfg.learning_rate = args.lr
    cfg.sharing = args.sharing.replace("-", "_")
    cfg.head = args.head
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    scene = load_scene(args.scene)
    if args.seed is not None:
        scene.seed = args.seed
    cfg = _config_from_args(args)
    model = build_model(cfg, scene)
    t0 = time.perf_counter()
    labeler = "geometry" if cfg.head == "geometry" else None
    samples = collect_samples(scene, spp=args.train_spp, sampler=args.sampler,
                              labeler=labeler, seed=scene.seed)
    t1 = time.perf_counter()
    curve = train(model, samples)
    t2 = time.perf_counter()
    save_checkpoint(model, args.out)
    loss_path = Path(args.out).with_suffix(".loss.csv")
    write_loss_csv(curve, loss_path)
    rpt = memory_report(cfg, scene.n_objects)
    print(f"[train] samples    outer {samples.n_outer}, inner {samples.n_inner} "
          f"from {samples.stats['shadow_rays']} rays")
    print(f"[train] collect    {t1 - t0:8.3f} s")
    print(f"[train] optimize   {t2 - t1:8.3f} s ({cfg.epochs} epochs)")
    if len(curve):
        print(f"[train] final loss {curve[-1, 2]:.6f}")
    print(f"[train] grids      {rpt['total_runtime_bytes']} runtime bytes "
          f"({rpt['outer']['runtime_kb']} kB outer pair, "
          f"{rpt['inner']['runtime_kb']} kB inner set per object)")
    print(f"wrote {args.out} and {loss_path}")
    return 0


def cmd_eval(args) -> int:
    a = load_image(args.a)
    b = load_image(args.b)
    value = psnr(a, b)
    print(f"PSNR: {value:.2f} dB" if np.isfinite(value) else "PSNR: inf dB")
    if args.out_diff:
        Image.fromarray(error_image(a, b, args.amplify), "RGB").save(args.out_diff)
        print(f"wrote {args.out_diff}")
    return 0


def _median_time(fn, reps: int = 5, warmup: int = 1):
    for _ in range(warmup):
        result = fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), result


def _bench_shadow_rays(scene, spp: int, threads: int) -> ShadowRays:
    ors, dirs, tms = [], [], []
    for s in range(spp):
        data = sample_pass(scene, scene.camera, s, scene.seed, threads)
        cos = np.einsum("ij,ij->i", data["normal"], data["ldir"])
        cast = data["hit"] & (cos > 0.0) & (data["pdf"] > 0.0)
        ors.append(data["point"][cast])
        dirs.append(data["ldir"][cast])
        tms.append(data["tmax"][cast])
    return ShadowRays(
        np.ascontiguousarray(np.concatenate(ors)),
        np.ascontiguousarray(np.concatenate(dirs)),
        np.ascontiguousarray(np.concatenate(tms)),
    )


def _bench_model(scene, path: Path, seed: int):
    if path.exists():
        return load_checkpoint(path)
    # no checkpoint for this scene: train a small stand-in; timing does not
    # depend on how good the weights are
    cfg = NifConfig(epochs=2, seed=seed)
    cfg.outer.grid_resolution = 64
    cfg.inner.grid_resolution = 64
    cfg.inner.dist_resolution = 64
    model = build_model(cfg, scene)
    samples = collect_samples(scene, spp=2, seed=seed)
    train(model, samples)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    return model


def cmd_bench(args) -> int:
    rows = []
    for scene_path in args.scenes:
        scene = load_scene(scene_path)
        if args.seed is not None:
            scene.seed = args.seed
        name = Path(scene_path).stem
        model = _bench_model(scene, Path(args.model_dir) / f"{name}.nif",
                             scene.seed)
        if model.n_objects != scene.n_objects:
            raise ValueError(f"model for {name} covers {model.n_objects} objects, "
                             f"scene has {scene.n_objects}")
        rays = _bench_shadow_rays(scene, args.spp, worker_count(None))
        bvh = BvhBackend()
        t_bvh, _ = _median_time(lambda: bvh.occluded(scene, rays, 1))
        route = scene.nif_route_mask(None)
        t_gather, (records, _) = _median_time(
            lambda: gather_queries(scene, rays, route, 1))
        om = records.kind == 0
        im = records.kind == 1
        o_obj = records.obj[om].astype(np.int64)
        o_coord = records.coord[om, 0:4]
        i_obj = records.obj[im].astype(np.int64)
        i_coord = records.coord[im, 0:5]
        t_og, x_o = _median_time(lambda: encode_outer_arrays(model, o_obj, o_coord))
        t_oi, _ = _median_time(lambda: forward_outer_arrays(model, o_obj, x_o))
        t_ig, x_i = _median_time(lambda: encode_inner_arrays(model, i_obj, i_coord))
        t_ii, _ = _median_time(lambda: forward_inner_arrays(model, i_obj, x_i))
        us = 1e6
        nif_total = (t_gather + t_og + t_oi + t_ig + t_ii) * us
        rows.append(BenchRow(
            scene=name,
            triangles=int(scene.pack.tri_counts.sum()),
            shadow_rays=len(rays),
            outer_rays=int(om.sum()),
            inner_rays=int(im.sum()),
            bvh_ray_cast_us=t_bvh * us,
            nif_ray_cast_us=t_gather * us,
            outer_grid_us=t_og * us,
            outer_inference_us=t_oi * us,
            inner_grid_us=t_ig * us,
            inner_inference_us=t_ii * us,
            nif_total_us=nif_total,
            speedup=(t_bvh * us) / nif_total if nif_total > 0 else 0.0,
        ))
        print(f"[bench] {name}: bvh {t_bvh * us:.0f} us, nif {nif_total:.0f} us")
    write_bench_csv(rows, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    scene_path = args.scene
    values = [int(v) for v in args.values.split(",")]
    results = []
    for v in values:
        scene = load_scene(scene_path)
        if args.seed is not None:
            scene.seed = args.seed
        cfg = NifConfig(epochs=args.epochs, seed=scene.seed)
        if args.param == "R":
            cfg.outer.grid_resolution = v
            cfg.inner.grid_resolution = v
            cfg.inner.dist_resolution = v
        else:
            cfg.outer.grid_latents = v
            cfg.inner.grid_latents = v
        model = build_model(cfg, scene)
        samples = collect_samples(scene, spp=args.train_spp, seed=scene.seed)
        train(model, samples)
        rc = RenderConfig(spp=args.spp)
        ref = render(scene, config=rc, backend=BvhBackend())
        img = render(scene, config=rc, backend=NifBackend(model))
        value_db = psnr(img, ref)
        results.append((v, value_db))
        print(f"[sweep] {args.param}={v}: {value_db:.2f} dB")
    with open(args.out, "w") as fh:
        fh.write("param,value,psnr_db\n")
        for v, db in results:
            fh.write(f"{args.param},{v},{db!r}\n")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="niftrace",
        description="Direct-lighting renderer with learned secondary-ray visibility.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a scene to PNG + PFM")
    r.add_argument("--scene", required=True)
    r.add_argument("--spp", type=int, default=16)
    r.add_argument("--backend", choices=("bvh", "nif", "hybrid"), default="bvh")
    r.add_argument("--model", help="checkpoint for the nif/hybrid backends")
    r.add_argument("--out", default="render.png")
    r.add_argument("--seed", type=int)
    r.add_argument("--res", type=_parse_res, help="WxH, overrides the scene camera")
    r.add_argument("--threshold", type=int, default=DEFAULT_TRI_THRESHOLD,
                   help="hybrid: triangle count below which objects stay on their trees")
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("train", help="collect samples and fit a model")
    t.add_argument("--scene", required=True)
    t.add_argument("--train-spp", type=int, default=4)
    t.add_argument("--sampler", choices=("importance", "uniform"), default="importance")
    t.add_argument("--epochs", type=int)
    t.add_argument("--sharing", choices=("shared", "per-object"), default="shared")
    t.add_argument("--head", choices=("occlusion", "geometry"), default="occlusion")
    t.add_argument("--out", default="model.nif")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--grid-res", type=int, help="override every grid resolution")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR between two images")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--out-diff", help="write an amplified difference image")
    e.add_argument("--amplify", type=float, default=1.0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-stage timing table")
    b.add_argument("--scenes", nargs="+", required=True)
    b.add_argument("--spp", type=int, default=4)
    b.add_argument("--model-dir", default="models")
    b.add_argument("--out", default="bench.csv")
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="train/evaluate over a hyperparameter")
    s.add_argument("--scene", required=True)
    s.add_argument("--param", choices=("R", "N"), required=True)
    s.add_argument("--values", required=True, help="comma-separated integers")
    s.add_argument("--train-spp", type=int, default=4)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--spp", type=int, default=16)
    s.add_argument("--out", default="sweep.csv")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "render" and args.backend in ("nif", "hybrid") \
            and not args.model:
        parser.error(f"--backend {args.backend} requires --model")
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as e:  # single-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
