"""Dense network substrate: layers, backprop, Adam and a finite-difference oracle.

Everything is float64 numpy. Batched inputs are row-major: one sample per row.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, PreconditionError, ShapeError

ACTIVATIONS = ("relu", "identity")


def xavier_init(shape, seed) -> np.ndarray:
    """Glorot-uniform matrix of ``shape`` = (fan_out, fan_in)."""
    rows, cols = int(shape[0]), int(shape[1])
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive dimensions, got {shape}")
    limit = np.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"inconsistent layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def create(cls, in_dim, out_dim, activation="relu", seed=None) -> "DenseLayer":
        return cls(xavier_init((out_dim, in_dim), seed), np.zeros(out_dim), activation)

    @classmethod
    def zeros(cls, in_dim, out_dim, activation="relu") -> "DenseLayer":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim), activation)

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


@dataclass
class ForwardCache:
    """What backward() needs from a forward() call."""

    inputs: list = field(default_factory=list)  # input to each layer
    preacts: list = field(default_factory=list)  # affine output of each layer
    layer_ids: tuple = ()
    vector_input: bool = False


def _activate(a, kind):
    if kind == "relu":
        return np.maximum(a, 0.0)
    return a


def forward(layers, x):
    """Run ``x`` (a vector or an (n, in) batch) through ``layers``.

    Returns ``(output, cache)``; the output keeps the dimensionality of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    vector_input = x.ndim == 1
    h = x[None, :] if vector_input else x
    if h.ndim != 2:
        raise ShapeError(f"forward expects a vector or matrix, got shape {x.shape}")
    cache = ForwardCache(layer_ids=tuple(id(layer) for layer in layers), vector_input=vector_input)
    for depth, layer in enumerate(layers):
        if h.shape[1] != layer.in_dim:
            raise ShapeError(
                f"layer {depth} expects width {layer.in_dim}, got {h.shape[1]}"
            )
        cache.inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        cache.preacts.append(a)
        h = _activate(a, layer.activation)
    return (h[0] if vector_input else h), cache


def backward(layers, cache, output_gradient):
    """Backpropagate ``output_gradient`` through a cached forward pass.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a list of
    ``(dweight, dbias)`` per layer, summed over the batch.
    """
    if cache is None or not isinstance(cache, ForwardCache):
        raise PreconditionError("backward requires the cache from a matching forward call")
    if cache.layer_ids != tuple(id(layer) for layer in layers):
        raise PreconditionError("cache was produced by a different layer sequence")
    g = np.asarray(output_gradient, dtype=np.float64)
    if cache.vector_input:
        g = g[None, :]
    if cache.preacts and g.shape != cache.preacts[-1].shape:
        raise ShapeError(
            f"output gradient shape {g.shape} does not match {cache.preacts[-1].shape}"
        )

    grads = [None] * len(layers)
    for depth in range(len(layers) - 1, -1, -1):
        layer = layers[depth]
        a = cache.preacts[depth]
        if layer.activation == "relu":
            g = g * (a > 0)
        grads[depth] = (g.T @ cache.inputs[depth], g.sum(axis=0))
        g = g @ layer.weight
    return grads, (g[0] if cache.vector_input else g)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, d) -> "AdamState":
        return cls(
            lr=d["lr"],
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            step=d["step"],
            m=[np.asarray(a, dtype=np.float64) for a in d["m"]],
            v=[np.asarray(a, dtype=np.float64) for a in d["v"]],
        )


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state tracks a different parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}, moment {m.shape}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def finite_difference_gradient(loss_fn, point, step=1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_fn(x)
        flat[i] = orig - step
        fm = loss_fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite loss while differencing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(a, b, floor=1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), the comparison used by gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
