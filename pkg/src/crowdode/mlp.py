"""Small dense networks on flat parameter vectors, with hand-written backprop.

Parameters are stored layer by layer as ``W`` (row-major, ``out x in``)
followed by ``b``. Inputs may carry any number of leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crowdode.errors import ShapeError

ACTIVATIONS = ("tanh", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ShapeError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim,) + self.hidden_dims + (self.output_dim,)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "output_dim": self.output_dim, "activation": self.activation}


def unpack(spec: MlpSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params,):
        raise ShapeError(f"theta has shape {theta.shape}, spec needs ({spec.n_params},)")
    layers, pos = [], 0
    for o, i in spec.layer_shapes:
        W = theta[pos:pos + o * i].reshape(o, i)
        pos += o * i
        b = theta[pos:pos + o]
        pos += o
        layers.append((W, b))
    return layers


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Weights uniform in +-1/sqrt(fan_in), zero biases."""
    parts = []
    for o, i in spec.layer_shapes:
        s = 1.0 / np.sqrt(i)
        parts.append(rng.uniform(-s, s, size=o * i))
        parts.append(np.zeros(o))
    return np.concatenate(parts)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic sigmoid


def forward_cached(spec: MlpSpec, theta, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"input last axis {x.shape[-1]} != input_dim {spec.input_dim}")
    lead = x.shape[:-1]
    h = x.reshape(-1, spec.input_dim)
    layers = unpack(spec, theta)
    pre, post = [], [h]
    for li, (W, b) in enumerate(layers):
        z = h @ W.T + b
        if li < len(layers) - 1:
            h = _act(spec.activation, z)
            pre.append(z)
            post.append(h)
        else:
            h = z
    return h.reshape(lead + (spec.output_dim,)), (lead, layers, pre, post)


def backward_cached(spec: MlpSpec, cache, cotangent):
    """Gradients of ``sum(output * cotangent)`` w.r.t. theta (summed over batch) and input."""
    lead, layers, pre, post = cache
    g = np.asarray(cotangent, dtype=float)
    if g.shape != lead + (spec.output_dim,):
        raise ShapeError(f"cotangent shape {g.shape} != {lead + (spec.output_dim,)}")
    g = g.reshape(-1, spec.output_dim)
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        grads.append(((g.T @ post[li]).ravel(), g.sum(axis=0)))
        g = g @ W
        if li > 0:
            g = g * _act_grad(spec.activation, pre[li - 1], post[li])
    dtheta = np.concatenate([part for pair in reversed(grads) for part in pair])
    return dtheta, g.reshape(lead + (spec.input_dim,))


def mlp_forward(spec: MlpSpec, theta, x) -> np.ndarray:
    return forward_cached(spec, theta, x)[0]


def mlp_backward(spec: MlpSpec, theta, x, cotangent):
    _, cache = forward_cached(spec, theta, x)
    return backward_cached(spec, cache, cotangent)
