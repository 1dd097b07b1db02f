#!/usr/bin/env python3
"""Regenerate the bundled meshes and scene descriptions under scenes/.

The four scenes cover the shapes the test suite and the experiment scripts
lean on: a single sphere for quick runs, the sphere/torus/plane set for
quality measurements, a two-object scene for weight-sharing comparisons,
and a pair of shapes with interpenetrating bounding boxes.
"""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from niftrace.meshgen import ground_plane, icosphere, torus
from niftrace.scene_io import write_obj

ROOT = Path(__file__).resolve().parents[1]
SCENES = ROOT / "scenes"
MESHES = SCENES / "meshes"


def write_scene(name: str, payload: dict):
    path = SCENES / f"{name}.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"wrote {path}")


def main():
    MESHES.mkdir(parents=True, exist_ok=True)

    v, f, n = icosphere(3, radius=1.0)
    write_obj(MESHES / "icosphere.obj", v, f, n)
    v, f, n = icosphere(2, radius=1.0)
    write_obj(MESHES / "icosphere_coarse.obj", v, f, n)
    v, f, n = torus(32, 18, major=1.0, minor=0.38)
    write_obj(MESHES / "torus.obj", v, f, n)
    v, f, n = ground_plane(4.0)
    write_obj(MESHES / "plane.obj", v, f, n)

    camera = {
        "position": [0.0, -3.4, 1.7],
        "look_at": [0.0, 0.0, 0.45],
        "up": [0.0, 0.0, 1.0],
        "vertical_fov": 38.0,
        "width": 512,
        "height": 288,
    }

    write_scene("sphere", {
        "objects": [
            {"mesh_path": "meshes/icosphere.obj", "translate": [0.0, 0.0, 0.0],
             "scale": 0.9, "albedo": [0.75, 0.33, 0.27]},
        ],
        "lights": [
            {"kind": "point", "position": [2.2, -1.6, 2.8],
             "intensity": [28.0, 28.0, 28.0]},
        ],
        "camera": camera,
        "seed": 11,
    })

    write_scene("sphere_torus_plane", {
        "objects": [
            {"mesh_path": "meshes/icosphere.obj", "translate": [-0.85, 0.05, 0.72],
             "scale": 0.72, "albedo": [0.74, 0.31, 0.25]},
            {"mesh_path": "meshes/torus.obj", "translate": [0.9, 0.15, 0.26],
             "scale": 0.62, "albedo": [0.26, 0.45, 0.78]},
            {"mesh_path": "meshes/plane.obj", "translate": [0.0, 0.0, 0.0],
             "scale": 1.0, "albedo": [0.62, 0.62, 0.6], "nif_enabled": False},
        ],
        "lights": [
            {"kind": "area",
             "corners": [[-0.7, -0.45, 2.6], [0.7, -0.45, 2.6],
                         [0.7, 0.95, 2.6], [-0.7, 0.95, 2.6]],
             "radiance": [11.0, 11.0, 10.5]},
        ],
        "camera": camera,
        "seed": 5,
    })

    write_scene("two_objects", {
        "objects": [
            {"mesh_path": "meshes/icosphere.obj", "translate": [-0.95, 0.0, 0.0],
             "scale": 0.8, "albedo": [0.75, 0.3, 0.25]},
            {"mesh_path": "meshes/torus.obj", "translate": [1.05, 0.0, 0.0],
             "scale": 0.66, "albedo": [0.28, 0.5, 0.75]},
        ],
        "lights": [
            {"kind": "point", "position": [2.6, -2.0, 2.6],
             "intensity": [34.0, 34.0, 34.0]},
        ],
        "camera": {**camera, "look_at": [0.0, 0.0, 0.0]},
        "seed": 17,
    })

    # the torus hole swallows most of the sphere, so both boxes overlap and
    # many shadow-ray origins sit inside two boxes at once
    write_scene("overlap", {
        "objects": [
            {"mesh_path": "meshes/torus.obj", "translate": [0.0, 0.0, 0.3],
             "scale": 0.85, "albedo": [0.3, 0.52, 0.75]},
            {"mesh_path": "meshes/icosphere_coarse.obj", "translate": [0.35, 0.0, 0.3],
             "scale": 0.5, "albedo": [0.78, 0.35, 0.25]},
            {"mesh_path": "meshes/plane.obj", "translate": [0.0, 0.0, -0.65],
             "scale": 1.0, "albedo": [0.6, 0.6, 0.58], "nif_enabled": False},
        ],
        "lights": [
            {"kind": "point", "position": [1.8, -2.2, 3.0],
             "intensity": [30.0, 30.0, 30.0]},
        ],
        "camera": {**camera, "look_at": [0.0, 0.0, 0.25]},
        "seed": 23,
    })


if __name__ == "__main__":
    main()
