"""Feed-forward encoder producing unit-norm embeddings, with exact backprop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DataError, StaleCacheError, ZeroNormError

NORM_FLOOR = 1e-8
DEFAULT_DIMS = (40, 64, 64, 16)

_ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
}


@dataclass
class EncoderParams:
    """Layers of (weight, bias); weight has shape (fan_in, fan_out).

    The activation is applied after every layer except the last, whose
    output is L2-normalized.
    """

    layers: List[Tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in self.layers]
        if not self.layers:
            raise DataError("encoder needs at least one layer")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DataError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[0] != self.layers[k - 1][0].shape[1]:
                raise DataError(f"layer {k} expects {w.shape[0]} inputs, "
                                f"previous layer gives {self.layers[k - 1][0].shape[1]}")

    @property
    def dims(self):
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def arrays(self):
        """Parameter arrays in flattening order: W0, b0, W1, b1, ..."""
        return [a for layer in self.layers for a in layer]

    def copy(self):
        return EncoderParams([(w.copy(), b.copy()) for w, b in self.layers],
                             self.activation, self.version)


def init_encoder(dims: Sequence[int] = DEFAULT_DIMS, seed=0, activation="relu"):
    """Glorot-uniform weights, zero biases."""
    if len(dims) < 2:
        raise DataError("dims needs an input and an output size")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return EncoderParams(layers, activation)


@dataclass
class EncoderCache:
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    post: List[np.ndarray]
    norms: np.ndarray
    output: np.ndarray
    params_id: int
    params_version: int


def encode(params: EncoderParams, features):
    """Map features (B, d_in) to unit-norm embeddings (B, d).

    Returns ``(embeddings, cache)``; the cache feeds :func:`backprop`.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise DataError(f"features of shape {x.shape} do not match encoder input {params.dims[0]}")
    act, _ = _ACTIVATIONS[params.activation]
    inputs, pre, post = [], [], []
    h = x
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        inputs.append(h)
        u = h @ w + b
        pre.append(u)
        h = u if k == last else act(u)
        post.append(h)
    norms = np.linalg.norm(h, axis=1)
    small = np.flatnonzero(norms < NORM_FLOOR)
    if small.size:
        raise ZeroNormError(int(small[0]), "pre-normalization embedding")
    z = h / norms[:, None]
    cache = EncoderCache(inputs, pre, post, norms, z, id(params), params.version)
    return z, cache


def backprop(params: EncoderParams, cache: EncoderCache, grad_embeddings):
    """Chain rule from dL/dz back to every weight, bias and the inputs.

    Returns ``(param_grads, grad_inputs)`` with ``param_grads`` in the order
    of :meth:`EncoderParams.arrays`.
    """
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StaleCacheError()
    g = np.asarray(grad_embeddings, dtype=np.float64)
    z = cache.output
    if g.shape != z.shape:
        raise DataError(f"gradient shape {g.shape} does not match embeddings {z.shape}")
    _, dact = _ACTIVATIONS[params.activation]

    # d(u/|u|)/du = (I - z z^T) / |u|
    g = (g - np.sum(g * z, axis=1, keepdims=True) * z) / cache.norms[:, None]
    grads = []
    last = len(params.layers) - 1
    for k in range(last, -1, -1):
        w, _ = params.layers[k]
        if k != last:
            g = g * dact(cache.pre[k], cache.post[k])
        grads.append(g.sum(axis=0))
        grads.append(cache.inputs[k].T @ g)
        g = g @ w.T
    grads.reverse()
    return grads, g
