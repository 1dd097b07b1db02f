"""Procedural test meshes with analytic shading normals.

Everything returns (vertices, faces, normals) with faces indexing 0-based;
`mesh_arrays` flattens that into the per-corner arrays the tree builder
takes, so tests and scripts can make geometry without touching disk.
"""

from __future__ import annotations

import math
from typing import Dict, Tuple

import numpy as np


def icosphere(subdivisions: int = 3, radius: float = 1.0):
    """Icosahedron refined by midpoint subdivision and projected to the
    sphere; 20 * 4**subdivisions triangles, normals point radially."""
    if subdivisions < 0:
        raise ValueError("subdivision count cannot be negative")
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    raw = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], np.float64)
    verts = [v / np.linalg.norm(v) for v in raw]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    for _ in range(subdivisions):
        cache: Dict[Tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        faces = [
            tri
            for (a, b, c) in faces
            for tri in (
                (a, midpoint(a, b), midpoint(c, a)),
                (b, midpoint(b, c), midpoint(a, b)),
                (c, midpoint(c, a), midpoint(b, c)),
                (midpoint(a, b), midpoint(b, c), midpoint(c, a)),
            )
        ]
    v = np.asarray(verts) * radius
    f = np.asarray(faces, np.int64)
    n = np.asarray(verts)  # unit positions are the sphere normals
    return v, f, n


def torus(nu: int = 32, nv: int = 16, major: float = 1.0, minor: float = 0.35):
    """Parametric torus around the z axis; 2 * nu * nv triangles."""
    if nu < 3 or nv < 3:
        raise ValueError("torus needs at least 3 segments per ring")
    us = 2.0 * math.pi * np.arange(nu) / nu
    vs = 2.0 * math.pi * np.arange(nv) / nv
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    cu, su = np.cos(uu), np.sin(uu)
    cv, sv = np.cos(vv), np.sin(vv)
    ring = major + minor * cv
    verts = np.stack([ring * cu, ring * su, minor * sv], axis=2).reshape(-1, 3)
    normals = np.stack([cv * cu, cv * su, sv], axis=2).reshape(-1, 3)

    def vid(i, j):
        return (i % nu) * nv + (j % nv)

    faces = []
    for i in range(nu):
        for j in range(nv):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    return verts, np.asarray(faces, np.int64), normals


def ground_plane(half_extent: float = 4.0, z: float = 0.0):
    """Two upward-facing triangles spanning a square in the z plane."""
    h = float(half_extent)
    verts = np.array([(-h, -h, z), (h, -h, z), (h, h, z), (-h, h, z)], np.float64)
    faces = np.array([(0, 1, 2), (0, 2, 3)], np.int64)
    normals = np.tile((0.0, 0.0, 1.0), (4, 1))
    return verts, faces, normals


def mesh_arrays(verts: np.ndarray, faces: np.ndarray, normals: np.ndarray):
    """Per-corner (v0, v1, v2, n0, n1, n2) arrays for the tree builder."""
    v = np.asarray(verts, np.float64)
    n = np.asarray(normals, np.float64)
    f = np.asarray(faces, np.int64)
    return (v[f[:, 0]], v[f[:, 1]], v[f[:, 2]],
            n[f[:, 0]], n[f[:, 1]], n[f[:, 2]])
