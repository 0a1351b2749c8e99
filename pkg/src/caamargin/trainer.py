"""Training loop: encoder + loss kernels + two-task min-norm loss balancing.

Flattened parameter order (used for gradients, optimizer state and the
min-norm solver): encoder W0, b0, W1, b1, ..., then classifier weights,
then class vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import losses
from .config import TrainConfig
from .encoder import EncoderParams, backprop, encode, init_encoder
from .errors import NumericalError, VanishedGradientsError
from .losses import ClassifierWeights, ClassVectorTable, EmbeddingBatch
from .synth import augment

CLASSIFICATION_LOSSES = ("cross_entropy", "am_softmax", "aam_softmax")
CONTRASTIVE_LOSSES = ("supcon", "sup_margin_con")


@dataclass
class MgdaState:
    lambda1: float
    lambda2: float
    norm1: float
    norm2: float
    combined_norm: float


def mgda_two_task(g1, g2):
    """Weights (l1, l2), l1 + l2 = 1, minimizing ||l1 g1 + l2 g2||.

    Closed form for two tasks: l1 = clip((g2 - g1).g2 / ||g1 - g2||^2, 0, 1).
    Equal nonzero gradients get (0.5, 0.5).
    """
    g1 = np.ravel(g1)
    g2 = np.ravel(g2)
    diff = g1 - g2
    denom = float(diff @ diff)
    if denom == 0.0:
        if not np.any(g1):
            raise VanishedGradientsError()
        return 0.5, 0.5
    lam1 = float(np.clip((g2 - g1) @ g2 / denom, 0.0, 1.0))
    return lam1, 1.0 - lam1


class SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, params, grads):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v += g
            p -= self.lr * v


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, cfg.momentum)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2)


@dataclass
class TrainState:
    encoder: EncoderParams
    classifier: ClassifierWeights
    class_table: ClassVectorTable
    optimizer: object = None
    step: int = 0

    def arrays(self):
        return self.encoder.arrays() + [self.classifier.weights, self.class_table.vectors]

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def copy(self):
        return TrainState(self.encoder.copy(), ClassifierWeights(self.classifier.weights.copy()),
                          ClassVectorTable(self.class_table.vectors.copy(),
                                           list(self.class_table.speaker_ids)),
                          None, self.step)


def init_state(cfg: TrainConfig, d_in, n_speakers):
    """Seeded encoder, unit-norm classifier rows, Gaussian class vectors.

    ``cfg.class_vector_init`` is the class-vector standard deviation; 0 gives
    uniform initial attention.
    """
    dims = (d_in, *cfg.hidden, cfg.embed_dim)
    encoder = init_encoder(dims, seed=cfg.seed, activation=cfg.activation)
    rng = np.random.default_rng([cfg.seed, 7])
    w = rng.normal(size=(n_speakers, cfg.embed_dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    vectors = cfg.class_vector_init * rng.normal(size=(n_speakers, cfg.embed_dim))
    table = ClassVectorTable(vectors, range(n_speakers))
    return TrainState(encoder, ClassifierWeights(w), table, make_optimizer(cfg))


def embed_batch(state: TrainState, features, labels, cfg: TrainConfig, aug_seed):
    """Encode originals and one augmented view of each; returns (batch, cache)."""
    features = np.asarray(features, dtype=np.float64)
    views = augment(features, cfg.aug_noise, cfg.aug_dropout, seed=aug_seed)
    z, cache = encode(state.encoder, np.vstack([features, views]))
    n = len(features)
    return EmbeddingBatch.from_views(z[:n], z[n:], labels), cache


def task_reports(state: TrainState, batch: EmbeddingBatch, cfg: TrainConfig):
    """Loss reports of the selected loss, one per task (one or two)."""
    margin = cfg.margin
    loss = cfg.loss
    if loss == "cross_entropy":
        return [losses.aam_softmax_loss(batch, state.classifier,
                                         losses.MarginConfig(0.0, margin.tau, margin.s))]
    if loss == "am_softmax":
        return [losses.aam_softmax_loss(batch, state.classifier, margin, margin_type="cosine")]
    if loss == "aam_softmax":
        return [losses.aam_softmax_loss(batch, state.classifier, margin)]
    if loss == "supcon":
        return [losses.supcon_loss(batch, margin.tau, cfg.denominator)]
    if loss == "sup_margin_con":
        return [losses.sup_margin_con_loss(batch, margin, cfg.denominator)]
    con_margin = margin if cfg.contrastive_m is None else losses.MarginConfig(
        cfg.contrastive_m, margin.tau, margin.s)
    return [
        losses.aam_softmax_loss(batch, state.classifier, margin),
        losses.caa_contrastive_loss(batch, state.class_table, con_margin, cfg.attention,
                                    cfg.denominator),
    ]


def flat_gradient(state: TrainState, cache, report):
    enc_grads, _ = backprop(state.encoder, cache, report.grad_embeddings)
    gw = report.grad_classifier_weights
    gc = report.grad_class_vectors
    parts = enc_grads + [
        np.zeros_like(state.classifier.weights) if gw is None else gw,
        np.zeros_like(state.class_table.vectors) if gc is None else gc,
    ]
    return np.concatenate([p.ravel() for p in parts])


def _unflatten(state, flat):
    out, start = [], 0
    for a in state.arrays():
        out.append(flat[start:start + a.size].reshape(a.shape))
        start += a.size
    return out


def train_step(state: TrainState, features, labels, cfg: TrainConfig, aug_seed=0):
    """One update on a batch of N utterances (2N rows after augmentation).

    Returns a dict of step metrics: loss, per-task values, lambdas and
    gradient norms.
    """
    if state.optimizer is None:
        state.optimizer = make_optimizer(cfg)
    batch, cache = embed_batch(state, features, labels, cfg, aug_seed)
    reports = task_reports(state, batch, cfg)
    grads = [flat_gradient(state, cache, r) for r in reports]

    metrics = {}
    if len(reports) == 1:
        combined = grads[0]
        metrics["loss"] = reports[0].value
    else:
        if cfg.lambda_mode == "mgda":
            lam1, lam2 = mgda_two_task(grads[0], grads[1])
        else:
            lam1, lam2 = cfg.lambda1, cfg.lambda2
        combined = lam1 * grads[0] + lam2 * grads[1]
        n1, n2 = float(np.linalg.norm(grads[0])), float(np.linalg.norm(grads[1]))
        mgda = MgdaState(lam1, lam2, n1, n2, float(np.linalg.norm(combined)))
        metrics.update(
            loss=lam1 * reports[0].value + lam2 * reports[1].value,
            classification=reports[0].value,
            contrastive=reports[1].value,
            lambda1=mgda.lambda1,
            lambda2=mgda.lambda2,
            grad_norm_classification=mgda.norm1,
            grad_norm_contrastive=mgda.norm2,
            grad_norm_combined=mgda.combined_norm,
            mgda_slack=mgda.combined_norm - min(n1, n2),
        )
    metrics["grad_norm"] = float(np.linalg.norm(combined))
    if not np.isfinite(metrics["loss"]) or not np.all(np.isfinite(combined)):
        raise NumericalError(
            f"non-finite loss/gradient at step {state.step}: "
            + ", ".join(f"{k}={v!r}" for k, v in sorted(metrics.items())))

    state.optimizer.step(state.arrays(), _unflatten(state, combined))
    state.encoder.version += 1
    state.classifier.normalize()
    state.step += 1
    return metrics


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    skipped: int
    means: dict
    maxima: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def fit(features, labels, cfg: TrainConfig, state: Optional[TrainState] = None,
        eval_fn: Optional[Callable[[TrainState], dict]] = None,
        step_callback: Optional[Callable[[dict], None]] = None):
    """Epoch loop with seeded shuffling; returns ``(state, history)``.

    Batches holding a single speaker cannot form negative pairs and are
    skipped (counted in ``EpochRecord.skipped``); the trailing partial batch
    is dropped.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if state is None:
        state = init_state(cfg, features.shape[1], int(labels.max()) + 1)
    per_batch = cfg.batch_size // 2
    history: List[EpochRecord] = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(labels))
        sums, maxima, steps, skipped = {}, {}, 0, 0
        for b in range(len(order) // per_batch):
            idx = order[b * per_batch:(b + 1) * per_batch]
            if np.unique(labels[idx]).size < 2:
                skipped += 1
                continue
            metrics = train_step(state, features[idx], labels[idx], cfg,
                                 aug_seed=[cfg.seed, 2, epoch, b])
            if step_callback is not None:
                step_callback(metrics)
            for k, v in metrics.items():
                sums[k] = sums.get(k, 0.0) + v
                maxima[k] = max(maxima.get(k, -np.inf), v)
            steps += 1
        means = {k: v / steps for k, v in sums.items()} if steps else {}
        extra = eval_fn(state) if eval_fn is not None else {}
        history.append(EpochRecord(epoch, steps, skipped, means, maxima, extra))
    return state, history
