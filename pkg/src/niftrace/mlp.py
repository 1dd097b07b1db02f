"""Small dense networks with hand-rolled backprop.

Hidden layers use a leaky rectifier; the head is either a sigmoid (binary
visibility) or identity (normal + depth regression). Layers keep gradient
and Adam moment buffers beside their weights so training never allocates
parameter-shaped temporaries.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .grids import AdamParams, adam_step_arrays

HIDDEN_SLOPE = 0.01


def leaky_relu(z: np.ndarray, slope: float = HIDDEN_SLOPE) -> np.ndarray:
    return np.where(z > 0, z, z * z.dtype.type(slope))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class DenseLayer:
    def __init__(self, n_in: int, n_out: int, dtype=np.float32):
        self.n_in = n_in
        self.n_out = n_out
        self.dtype = np.dtype(dtype)
        self.w = np.zeros((n_out, n_in), dtype)
        self.b = np.zeros(n_out, dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.mw = np.zeros_like(self.w)
        self.vw = np.zeros_like(self.w)
        self.mb = np.zeros_like(self.b)
        self.vb = np.zeros_like(self.b)
        self.adam_w = AdamParams()
        self.adam_b = AdamParams()


class Mlp:
    """Fully connected stack: dims[0] -> ... -> dims[-1]."""

    def __init__(self, dims: Sequence[int], output_activation: str = "sigmoid",
                 hidden_slope: float = HIDDEN_SLOPE, dtype=np.float32):
        if len(dims) < 2:
            raise ValueError("need at least an input and an output width")
        if any(d < 1 for d in dims):
            raise ValueError("layer widths must be positive")
        if output_activation not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.dims = list(dims)
        self.output_activation = output_activation
        self.hidden_slope = hidden_slope
        self.dtype = np.dtype(dtype)
        self.layers: List[DenseLayer] = [
            DenseLayer(dims[i], dims[i + 1], dtype) for i in range(len(dims) - 1)
        ]
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_parameters(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected (batch, {self.input_dim}) input")
        inputs = [x]
        pres = []
        a = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = a @ layer.w.T + layer.b
            pres.append(z)
            if i < last:
                a = leaky_relu(z, self.hidden_slope)
                inputs.append(a)
            elif self.output_activation == "sigmoid":
                a = sigmoid(z)
            else:
                a = z
        self._cache = (inputs, pres, a)
        return a

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Backpropagate d(loss)/d(output); returns d(loss)/d(input) and adds
        weight and bias gradients into the layer buffers."""
        if self._cache is None:
            raise RuntimeError("backward before forward")
        inputs, pres, out = self._cache
        up = np.asarray(upstream, self.dtype)
        if up.shape != out.shape:
            raise ValueError("upstream gradient shape does not match the output")
        if self.output_activation == "sigmoid":
            dz = up * out * (1.0 - out)
        else:
            dz = up
        slope = self.dtype.type(self.hidden_slope)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            layer.gw += dz.T @ inputs[i]
            layer.gb += dz.sum(axis=0)
            dx = dz @ layer.w
            if i > 0:
                dz = np.where(pres[i - 1] > 0, dx, dx * slope)
        return dx

    def adam_step(self):
        for layer in self.layers:
            adam_step_arrays(layer.w, layer.gw, layer.mw, layer.vw, layer.adam_w)
            adam_step_arrays(layer.b, layer.gb, layer.mb, layer.vb, layer.adam_b)

    def set_learning_rate(self, lr: float):
        for layer in self.layers:
            layer.adam_w.learning_rate = lr
            layer.adam_b.learning_rate = lr

    def zero_grad(self):
        for layer in self.layers:
            layer.gw.fill(0)
            layer.gb.fill(0)


def xavier_init(mlp: Mlp, seed: int):
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for layer in mlp.layers:
        limit = np.sqrt(6.0 / (layer.n_in + layer.n_out))
        layer.w[...] = rng.uniform(-limit, limit, layer.w.shape).astype(layer.dtype)
        layer.b.fill(0)
    return mlp


def build_mlp(input_dim: int, hidden_layers: int, hidden_width: int,
              output_dim: int, output_activation: str, seed: int,
              dtype=np.float32) -> Mlp:
    dims = [input_dim] + [hidden_width] * hidden_layers + [output_dim]
    return xavier_init(Mlp(dims, output_activation, dtype=dtype), seed)


def l2_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over every scalar; returns (loss, d(loss)/d(pred))."""
    target = np.asarray(target, pred.dtype)
    if target.shape != pred.shape:
        raise ValueError("prediction and target shapes differ")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = diff * pred.dtype.type(2.0 / diff.size)
    return loss, grad
