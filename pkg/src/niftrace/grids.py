"""Trainable feature grids with cell-centered bilinear interpolation.

A 2D grid stores an N-vector of latents per cell over the unit square; the
azimuth axis can wrap so interpolation is seamless where the angle rolls
over. Gradients accumulate into a twin array and a fused Adam step applies
and clears them. Interpolation weights are always computed in float64; the
stored latents, gradients, and moments live in the grid's own dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from numba import njit


@dataclass
class AdamParams:
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-15
    step_count: int = 0

    def clone(self) -> "AdamParams":
        return AdamParams(self.learning_rate, self.beta1, self.beta2, self.epsilon, 0)


@njit(cache=True)
def _adam_update(param, grad, m, v, lr, b1, b2, eps, t):
    # moments update, bias correction, and grad clearing in one pass
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(param.shape[0]):
        g = grad[i] * 1.0
        mi = b1 * (m[i] * 1.0) + (1.0 - b1) * g
        vi = b2 * (v[i] * 1.0) + (1.0 - b2) * g * g
        m[i] = mi
        v[i] = vi
        mh = mi / c1
        vh = vi / c2
        param[i] = param[i] - lr * mh / (vh ** 0.5 + eps)
        grad[i] = 0.0


def adam_step_arrays(param, grad, m, v, params: AdamParams):
    """Apply one bias-corrected Adam step to a parameter block and clear its
    gradient. The block's step counter advances by one."""
    params.step_count += 1
    _adam_update(
        param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
        params.learning_rate, params.beta1, params.beta2, params.epsilon,
        params.step_count,
    )


class FeatureGrid2D:
    def __init__(self, resolution: int, n_latents: int, wrap_u: bool = True,
                 dtype=np.float32):
        if resolution < 1 or n_latents < 1:
            raise ValueError("resolution and latent count must be at least 1")
        self.resolution = resolution
        self.n_latents = n_latents
        self.wrap_u = wrap_u
        self.dtype = np.dtype(dtype)
        shape = (resolution, resolution, n_latents)
        self.latents = np.zeros(shape, dtype)
        self.grad = np.zeros(shape, dtype)
        self.m = np.zeros(shape, dtype)
        self.v = np.zeros(shape, dtype)
        self.adam = AdamParams()

    @property
    def allocated_bytes(self) -> int:
        return self.latents.nbytes + self.grad.nbytes + self.m.nbytes + self.v.nbytes


class FeatureGrid1D:
    def __init__(self, resolution: int, n_latents: int, dtype=np.float32):
        if resolution < 1 or n_latents < 1:
            raise ValueError("resolution and latent count must be at least 1")
        self.resolution = resolution
        self.n_latents = n_latents
        self.dtype = np.dtype(dtype)
        shape = (resolution, n_latents)
        self.latents = np.zeros(shape, dtype)
        self.grad = np.zeros(shape, dtype)
        self.m = np.zeros(shape, dtype)
        self.v = np.zeros(shape, dtype)
        self.adam = AdamParams()

    @property
    def allocated_bytes(self) -> int:
        return self.latents.nbytes + self.grad.nbytes + self.m.nbytes + self.v.nbytes


INIT_SCALE = 1e-4


def init_grid_2d(resolution, n_latents, seed, wrap_u=True, dtype=np.float32) -> FeatureGrid2D:
    g = FeatureGrid2D(resolution, n_latents, wrap_u, dtype)
    rng = np.random.Generator(np.random.PCG64(seed))
    g.latents[...] = rng.uniform(
        -INIT_SCALE, INIT_SCALE, g.latents.shape
    ).astype(dtype)
    return g


def init_grid_1d(resolution, n_latents, seed, dtype=np.float32) -> FeatureGrid1D:
    g = FeatureGrid1D(resolution, n_latents, dtype)
    rng = np.random.Generator(np.random.PCG64(seed))
    g.latents[...] = rng.uniform(
        -INIT_SCALE, INIT_SCALE, g.latents.shape
    ).astype(dtype)
    return g


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------


def _axis_indices(x: np.ndarray, resolution: int, wrap: bool):
    """Cell-centered index pair and fraction: sample i sits at (i + 0.5) / R."""
    xc = x * resolution - 0.5
    x0 = np.floor(xc)
    w = xc - x0
    i0 = x0.astype(np.int64)
    i1 = i0 + 1
    if wrap:
        i0 = i0 % resolution
        i1 = i1 % resolution
    else:
        i0 = np.clip(i0, 0, resolution - 1)
        i1 = np.clip(i1, 0, resolution - 1)
    return i0, i1, w


def _bilinear(grid: FeatureGrid2D, uv: np.ndarray):
    u = np.asarray(uv[:, 0], np.float64)
    v = np.asarray(uv[:, 1], np.float64)
    iu0, iu1, wu = _axis_indices(u, grid.resolution, grid.wrap_u)
    iv0, iv1, wv = _axis_indices(v, grid.resolution, False)
    w00 = (1.0 - wu) * (1.0 - wv)
    w01 = (1.0 - wu) * wv
    w10 = wu * (1.0 - wv)
    w11 = wu * wv
    return (iu0, iu1, iv0, iv1), (w00, w01, w10, w11)


def lookup_2d_batch(grid: FeatureGrid2D, uv: np.ndarray) -> np.ndarray:
    (iu0, iu1, iv0, iv1), (w00, w01, w10, w11) = _bilinear(grid, uv)
    g = grid.latents
    out = (
        w00[:, None] * g[iu0, iv0]
        + w01[:, None] * g[iu0, iv1]
        + w10[:, None] * g[iu1, iv0]
        + w11[:, None] * g[iu1, iv1]
    )
    return out.astype(grid.dtype)


def lookup_2d(grid: FeatureGrid2D, coord) -> np.ndarray:
    """Bilinear read at (u, v); u wraps when the grid does, v clamps."""
    uv = np.array([[coord[0], coord[1]]], np.float64)
    return lookup_2d_batch(grid, uv)[0]


def accumulate_grad_2d_batch(grid: FeatureGrid2D, uv: np.ndarray, upstream: np.ndarray):
    (iu0, iu1, iv0, iv1), (w00, w01, w10, w11) = _bilinear(grid, uv)
    up = np.asarray(upstream, np.float64)
    np.add.at(grid.grad, (iu0, iv0), (w00[:, None] * up).astype(grid.dtype))
    np.add.at(grid.grad, (iu0, iv1), (w01[:, None] * up).astype(grid.dtype))
    np.add.at(grid.grad, (iu1, iv0), (w10[:, None] * up).astype(grid.dtype))
    np.add.at(grid.grad, (iu1, iv1), (w11[:, None] * up).astype(grid.dtype))


def accumulate_grad_2d(grid: FeatureGrid2D, coord, upstream):
    """Scatter an upstream (N,) gradient to the four interpolation corners
    with the same weights a lookup would use."""
    uv = np.array([[coord[0], coord[1]]], np.float64)
    accumulate_grad_2d_batch(grid, uv, np.asarray(upstream)[None, :])


def lookup_1d_batch(grid: FeatureGrid1D, x: np.ndarray) -> np.ndarray:
    i0, i1, w = _axis_indices(np.asarray(x, np.float64), grid.resolution, False)
    g = grid.latents
    out = (1.0 - w)[:, None] * g[i0] + w[:, None] * g[i1]
    return out.astype(grid.dtype)


def lookup_1d(grid: FeatureGrid1D, x: float) -> np.ndarray:
    return lookup_1d_batch(grid, np.array([x], np.float64))[0]


def accumulate_grad_1d_batch(grid: FeatureGrid1D, x: np.ndarray, upstream: np.ndarray):
    i0, i1, w = _axis_indices(np.asarray(x, np.float64), grid.resolution, False)
    up = np.asarray(upstream, np.float64)
    np.add.at(grid.grad, i0, ((1.0 - w)[:, None] * up).astype(grid.dtype))
    np.add.at(grid.grad, i1, (w[:, None] * up).astype(grid.dtype))


def accumulate_grad_1d(grid: FeatureGrid1D, x: float, upstream):
    accumulate_grad_1d_batch(grid, np.array([x], np.float64), np.asarray(upstream)[None, :])


def adam_step(grid, params: AdamParams = None):
    """Adam over every latent scalar; gradients are consumed and zeroed."""
    p = params if params is not None else grid.adam
    adam_step_arrays(grid.latents, grid.grad, grid.m, grid.v, p)


# ---------------------------------------------------------------------------
# byte accounting
# ---------------------------------------------------------------------------


def grid_bytes(resolution: int, n_dims: int = 2, training: bool = False) -> int:
    """Published byte-accounting formulas for grid storage.

    These are a report in the accounting units of the published figures
    (2-byte latents, 4-byte grad and moments, latent count absorbed), not
    the size of our float arrays; see `allocated_bytes` for the real thing.
    Training covers latents + grad + two moments, runtime just the latents
    as deployed (the runtime figure absorbs the position/direction pair).
    """
    if n_dims == 2:
        return 14 * resolution * resolution if training else 4 * resolution * resolution
    if n_dims == 1:
        return 14 * resolution if training else 2 * resolution
    raise ValueError("grids are one- or two-dimensional")
