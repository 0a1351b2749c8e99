"""Central finite-difference checks for every loss kernel and the encoder.

Embedding and classifier-weight gradients are compared against finite
differences of ``loss(normalize(U))`` at ``U = Z``, which is what the
tangent-projected analytic gradients represent.  The error of one
parameter group is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``;
a suite reports the maximum over groups and instances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses
from .encoder import DEFAULT_DIMS, backprop, encode, init_encoder
from .losses import ClassifierWeights, ClassVectorTable, EmbeddingBatch, MarginConfig

FD_STEP = 1e-5
TOLERANCE = 1e-4
KINK_GUARD = 1e-4


def relative_error(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def numeric_gradient(f, x, h=FD_STEP):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + h
        up = f(x)
        flat[k] = keep - h
        down = f(x)
        flat[k] = keep
        g[k] = (up - down) / (2 * h)
    return grad


def _unit(u):
    return u / np.linalg.norm(u, axis=1, keepdims=True)


@dataclass
class Instance:
    z: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    vectors: np.ndarray
    n: int

    def batch(self, z=None):
        z = self.z if z is None else _unit(z)
        return EmbeddingBatch.from_views(z[:self.n], z[self.n:], self.labels)


def random_instance(rng):
    d = int(rng.choice([4, 8, 16]))
    n = int(rng.choice([4, 8]))
    n_speakers = int(rng.integers(2, n + 1))
    labels = rng.integers(0, n_speakers, size=n)
    labels[:2] = [0, 1]
    rng.shuffle(labels)
    n_classes = n_speakers + int(rng.integers(0, 3))
    return Instance(
        z=_unit(rng.normal(size=(2 * n, d))),
        labels=labels,
        weights=_unit(rng.normal(size=(n_classes, d))),
        vectors=rng.normal(size=(n_classes, d)),
        n=n,
    )


def _check_supcon(inst, rng, corrupt):
    r = losses.supcon_loss(inst.batch(), tau=0.07)
    num = numeric_gradient(lambda u: losses.supcon_loss(inst.batch(u), 0.07).value, inst.z)
    return [relative_error(r.grad_embeddings * corrupt, num)]


def _check_sup_margin(inst, rng, corrupt):
    cfg = MarginConfig(m=0.2, tau=0.07)
    r = losses.sup_margin_con_loss(inst.batch(), cfg)
    num = numeric_gradient(lambda u: losses.sup_margin_con_loss(inst.batch(u), cfg).value, inst.z)
    return [relative_error(r.grad_embeddings * corrupt, num)]


def _check_aam(inst, rng, corrupt):
    cfg = MarginConfig(m=0.2, s=30.0)
    r = losses.aam_softmax_loss(inst.batch(), ClassifierWeights(inst.weights), cfg)

    def by_z(u):
        return losses.aam_softmax_loss(inst.batch(u), ClassifierWeights(inst.weights), cfg).value

    def by_w(w):
        return losses.aam_softmax_loss(inst.batch(), ClassifierWeights(_unit(w)), cfg).value

    return [relative_error(r.grad_embeddings * corrupt, numeric_gradient(by_z, inst.z)),
            relative_error(r.grad_classifier_weights * corrupt, numeric_gradient(by_w, inst.weights))]


def _check_caa(inst, rng, corrupt):
    cfg = MarginConfig()
    lambdas = tuple(rng.uniform(0.1, 1.0, size=2))
    ids = range(len(inst.vectors))

    def run(z=None, w=None, c=None):
        return losses.caa_margin_con_loss(
            inst.batch(z),
            ClassifierWeights(inst.weights if w is None else _unit(w)),
            ClassVectorTable(inst.vectors if c is None else c, ids),
            cfg, lambdas)

    r = run()
    return [
        relative_error(r.grad_embeddings * corrupt,
                       numeric_gradient(lambda u: run(z=u).value, inst.z)),
        relative_error(r.grad_classifier_weights * corrupt,
                       numeric_gradient(lambda u: run(w=u).value, inst.weights)),
        relative_error(r.grad_class_vectors * corrupt,
                       numeric_gradient(lambda u: run(c=u).value, inst.vectors)),
    ]


def _plain_forward(layers, x, activation):
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0) if activation == "relu" else np.tanh(h)
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def _near_kink(params, x):
    h = x
    for w, b in params.layers[:-1]:
        u = h @ w + b
        if np.min(np.abs(u)) < KINK_GUARD:
            return True
        h = np.maximum(u, 0.0)
    return False


def _check_encoder(rng, corrupt, dims=DEFAULT_DIMS, batch=4):
    # resample inputs until no ReLU pre-activation sits within reach of the FD step
    params = init_encoder(dims, seed=int(rng.integers(2**31)))
    for w, b in params.layers:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    while True:
        x = rng.normal(size=(batch, dims[0]))
        if not _near_kink(params, x):
            break
    upstream = rng.normal(size=(batch, dims[-1]))
    _, cache = encode(params, x)
    grads, grad_x = backprop(params, cache, upstream)

    layers = [[w.copy(), b.copy()] for w, b in params.layers]
    errors = []
    for k in range(len(layers)):
        for slot in (0, 1):
            def f(p, k=k, slot=slot):
                trial = [list(l) for l in layers]
                trial[k][slot] = p
                return float(np.sum(upstream * _plain_forward(trial, x, params.activation)))
            num = numeric_gradient(f, layers[k][slot])
            errors.append(relative_error(grads[2 * k + slot] * corrupt, num))
    num_x = numeric_gradient(
        lambda u: float(np.sum(upstream * _plain_forward(layers, u, params.activation))), x)
    errors.append(relative_error(grad_x * corrupt, num_x))
    return errors


SUITES = ("supcon_loss", "sup_margin_con_loss", "aam_softmax_loss", "caa_margin_con_loss",
          "encoder_backprop")

_LOSS_CHECKS = {
    "supcon_loss": _check_supcon,
    "sup_margin_con_loss": _check_sup_margin,
    "aam_softmax_loss": _check_aam,
    "caa_margin_con_loss": _check_caa,
}


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def run_gradcheck(instances=50, seed=0, corrupt=None, suites=SUITES):
    """Run the suites; ``corrupt`` names one suite whose analytic gradients are
    scaled by 1.01 before comparison (negative control)."""
    results = []
    for k, name in enumerate(suites):
        rng = np.random.default_rng([seed, k])
        factor = 1.01 if name == corrupt else 1.0
        start = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            if name == "encoder_backprop":
                errs = _check_encoder(rng, factor)
            else:
                errs = _LOSS_CHECKS[name](random_instance(rng), rng, factor)
            worst = max(worst, *errs)
        results.append(SuiteResult(name, instances, worst, time.perf_counter() - start))
    return results
