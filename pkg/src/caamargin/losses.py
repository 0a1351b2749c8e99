"""Margin-based supervised contrastive losses with class-aware attention.

Every loss returns a :class:`LossReport` holding the scalar value and the
exact analytic gradients.  Gradients with respect to unit-norm parameters
(embeddings, classifier weights) are projected onto the tangent space of
the sphere at each row, which equals the gradient of ``loss(normalize(U))``
at ``U = Z``.  Class vectors are unconstrained and get raw gradients.

Conventions used throughout:

* all rows of a batch act as anchors (originals and augmented views);
* the contrastive terms are summed over anchors, the classification term
  is averaged over anchors;
* cosines are clamped to ``[-1 + 1e-7, 1 - 1e-7]`` and the clamp has zero
  derivative outside that range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DataError,
    EmptyPairSetError,
    LabelRangeError,
    NumericalError,
    UnknownSpeakerError,
    ZeroNormError,
)

COS_EPS = 1e-7
NORM_TOL = 1e-6
DENOMINATORS = ("negatives_only", "all_others")

ORIGINAL = 0
AUGMENTED = 1


@dataclass(frozen=True)
class MarginConfig:
    m: float = 0.2
    tau: float = 0.07
    s: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.m < math.pi / 2:
            raise DataError(f"margin m={self.m} outside [0, pi/2)")
        if not self.tau > 0:
            raise DataError(f"temperature tau={self.tau} must be positive")
        if not self.s > 0:
            raise DataError(f"scale s={self.s} must be positive")


@dataclass
class EmbeddingBatch:
    """2N unit-norm embeddings: N originals and N augmented views.

    ``view`` flags each row as original (0) or augmented (1).  The k-th
    original row is paired with the k-th augmented row; the pair must share
    a speaker id.
    """

    data: np.ndarray
    labels: np.ndarray
    view: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.view = np.asarray(self.view, dtype=np.int64)
        if self.check:
            self.validate()

    @classmethod
    def from_views(cls, originals, augmented, labels, check=True):
        originals = np.asarray(originals, dtype=np.float64)
        augmented = np.asarray(augmented, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n = len(originals)
        return cls(
            data=np.vstack([originals, augmented]),
            labels=np.concatenate([labels, labels]),
            view=np.repeat([ORIGINAL, AUGMENTED], n),
            check=check,
        )

    @property
    def size(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def view_pairs(self):
        """Indices (original, augmented) of the k-th view pairs."""
        return np.flatnonzero(self.view == ORIGINAL), np.flatnonzero(self.view == AUGMENTED)

    def validate(self):
        z, labels, view = self.data, self.labels, self.view
        if z.ndim != 2:
            raise DataError(f"embedding data must be 2-D, got shape {z.shape}")
        n, d = z.shape
        if labels.shape != (n,) or view.shape != (n,):
            raise DataError("labels and view flags must have one entry per row")
        if d < 2:
            raise DataError(f"embedding dimension {d} < 2")
        if not np.all(np.isfinite(z)):
            raise NumericalError("embedding batch contains non-finite entries")
        norms = np.linalg.norm(z, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise DataError(f"embedding row {bad[0]} has norm {norms[bad[0]]:.9g}, expected 1")
        if not np.all((view == ORIGINAL) | (view == AUGMENTED)):
            raise DataError("view flags must be 0 (original) or 1 (augmented)")
        orig, aug = self.view_pairs()
        if len(orig) != len(aug):
            raise DataError(f"{len(orig)} originals but {len(aug)} augmented views")
        if len(orig) < 2:
            raise DataError("a batch needs at least 2 originals")
        if not np.array_equal(labels[orig], labels[aug]):
            raise DataError("original and augmented views are not paired by speaker")
        if np.unique(labels).size < 2:
            raise DataError("a batch needs at least 2 distinct speakers")


@dataclass
class ClassVectorTable:
    """Trainable per-speaker attention vectors (no norm constraint)."""

    vectors: np.ndarray
    speaker_ids: Sequence[int]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.speaker_ids = [int(s) for s in self.speaker_ids]
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.speaker_ids):
            raise DataError("class vector table needs one row per speaker id")
        if len(set(self.speaker_ids)) != len(self.speaker_ids):
            raise DataError("duplicate speaker ids in class vector table")
        self._row = {s: k for k, s in enumerate(self.speaker_ids)}

    def rows_for(self, speakers):
        try:
            return np.array([self._row[int(s)] for s in speakers], dtype=np.int64)
        except KeyError as exc:
            raise UnknownSpeakerError(exc.args[0]) from None


@dataclass
class ClassifierWeights:
    """Unit-norm classification head, row k belongs to global speaker k."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def n_classes(self):
        return self.weights.shape[0]

    def normalize(self, tol=1e-12):
        """Renormalize rows whose norm drifted from 1 by more than ``tol``."""
        norms = np.linalg.norm(self.weights, axis=1)
        if np.any(norms < 1e-12):
            raise ZeroNormError(int(np.argmin(norms)), "classifier weight")
        drift = np.abs(norms - 1.0) > tol
        self.weights[drift] /= norms[drift, None]


@dataclass
class LossReport:
    value: float
    grad_embeddings: np.ndarray
    grad_class_vectors: Optional[np.ndarray] = None
    grad_classifier_weights: Optional[np.ndarray] = None
    parts: dict = field(default_factory=dict)

    def check_finite(self):
        arrays = [self.grad_embeddings, self.grad_class_vectors, self.grad_classifier_weights]
        if not math.isfinite(self.value) or any(
            a is not None and not np.all(np.isfinite(a)) for a in arrays
        ):
            raise NumericalError(f"non-finite loss or gradient (value={self.value!r})")
        return self


# ----------------------------------------------------------------------------
# elementary pieces


def cosine_similarity(a, b):
    """Unclamped cosine of the angle between two nonzero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0:
        raise ZeroNormError(0, "first input")
    if nb == 0:
        raise ZeroNormError(1, "second input")
    return float(a @ b / (na * nb))


def cosine_matrix(a, b):
    """Pairwise unclamped cosines between the rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    for norms, what in ((na, "left"), (nb, "right")):
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ZeroNormError(int(zero[0]), f"{what} input")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def clamp_cos(c):
    """Clamp cosines away from +-1; returns (clamped, mask of pass-through entries)."""
    c = np.asarray(c, dtype=np.float64)
    lo, hi = -1.0 + COS_EPS, 1.0 - COS_EPS
    return np.clip(c, lo, hi), (c > lo) & (c < hi)


def cos_plus_margin(cos_theta, m):
    """cos(theta + m) given cos(theta).

    Where theta + m >= pi the angular form stops being monotone in theta,
    so ``cos(theta) - m * sin(m)`` is used instead.
    """
    value, _ = _margin_and_slope(cos_theta, m)
    return float(value) if np.ndim(value) == 0 else value


def _margin_and_slope(c, m):
    c = np.asarray(c, dtype=np.float64)
    if m == 0:
        return c.copy(), np.ones_like(c)
    sin_theta = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    cos_m, sin_m = math.cos(m), math.sin(m)
    angular = c * cos_m - sin_theta * sin_m
    # d/dc [c cos m - sqrt(1 - c^2) sin m]; c is clamped so sin_theta > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = cos_m + c * sin_m / sin_theta
    valid = c > math.cos(math.pi - m)
    value = np.where(valid, angular, c - m * sin_m)
    slope = np.where(valid, slope, 1.0)
    return value, slope


def _tangent(grad, z):
    return grad - np.sum(grad * z, axis=1, keepdims=True) * z


def _logsumexp_rows(x):
    top = np.max(x, axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (top + np.log(np.sum(np.exp(x - top), axis=1, keepdims=True)))[:, 0]


def _softmax_rows(x):
    e = np.exp(x - np.max(x, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def _pair_masks(labels, denominator):
    if denominator not in DENOMINATORS:
        raise DataError(f"denominator must be one of {DENOMINATORS}, got {denominator!r}")
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    pos = same & ~eye
    den = ~same if denominator == "negatives_only" else ~eye
    for mask, kind in ((pos, "positive"), (den, "negative")):
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise EmptyPairSetError(int(labels[empty[0]]), kind)
    return pos, den


def _contrastive_core(z, labels, m, tau, denominator, alpha=None):
    """Margin contrastive term summed over anchors.

    Returns (value, dL/dcos, dL/dalpha) where cos and alpha are n x n.
    """
    pos, den = _pair_masks(labels, denominator)
    cos, inside = clamp_cos(z @ z.T)
    phi, dphi = _margin_and_slope(cos, m)
    a = 1.0 if alpha is None else alpha

    num_logit = phi * a / tau
    den_logit = np.where(den, cos * a / tau, -np.inf)
    lse = _logsumexp_rows(den_logit)
    n_pos = pos.sum(axis=1)
    per_anchor = lse - np.sum(np.where(pos, num_logit, 0.0), axis=1) / n_pos
    value = float(np.sum(per_anchor))

    g_num = np.where(pos, -1.0 / n_pos[:, None], 0.0)
    g_den = np.where(den, np.exp(den_logit - lse[:, None]), 0.0)
    g_cos = (g_num * dphi + g_den) * a / tau
    g_cos = np.where(inside, g_cos, 0.0)
    g_alpha = None if alpha is None else (g_num * phi + g_den * cos) / tau
    return value, g_cos, g_alpha


# ----------------------------------------------------------------------------
# contrastive losses


def supcon_loss(batch: EmbeddingBatch, tau: float = 0.07, denominator="negatives_only"):
    """Supervised contrastive loss, summed over all 2N anchors."""
    return sup_margin_con_loss(batch, MarginConfig(m=0.0, tau=tau), denominator)


def sup_margin_con_loss(batch: EmbeddingBatch, cfg: MarginConfig = MarginConfig(),
                        denominator="negatives_only"):
    """Supervised contrastive loss with an additive angular margin on positives.

    Numerators use cos(theta_ip + m); the denominator sums exp(cos theta_ia / tau)
    over ``A(i)``, which by default holds only the other-speaker rows.
    """
    z = batch.data
    value, g_cos, _ = _contrastive_core(z, batch.labels, cfg.m, cfg.tau, denominator)
    grad = _tangent((g_cos + g_cos.T) @ z, z)
    return LossReport(value, grad).check_finite()


def caa_scores(batch: EmbeddingBatch, table: ClassVectorTable):
    """Class-aware attention matrix alpha[i, j].

    The softmax runs over the class vectors of the speakers present in the
    batch, so alpha[i, j] depends on row j only through its label.
    """
    alpha, _ = _caa_forward(batch, table)
    return alpha


def _caa_forward(batch, table):
    present = np.unique(batch.labels)
    rows = table.rows_for(present)
    centroids = table.vectors[rows]
    probs = _softmax_rows(batch.data @ centroids.T)
    col = np.searchsorted(present, batch.labels)
    return probs[:, col], (rows, centroids, probs, col)


def caa_contrastive_loss(batch: EmbeddingBatch, table: ClassVectorTable,
                         cfg: MarginConfig = MarginConfig(), attention=True,
                         denominator="negatives_only"):
    """Margin contrastive term with every exponent scaled by its CAA score.

    ``attention=False`` fixes all scores to 1, which reduces this to
    :func:`sup_margin_con_loss`.
    """
    z = batch.data
    grad_cv = np.zeros_like(table.vectors)
    if not attention:
        table.rows_for(np.unique(batch.labels))
        value, g_cos, _ = _contrastive_core(z, batch.labels, cfg.m, cfg.tau, denominator)
        grad = _tangent((g_cos + g_cos.T) @ z, z)
        return LossReport(value, grad, grad_class_vectors=grad_cv).check_finite()

    alpha, (rows, centroids, probs, col) = _caa_forward(batch, table)
    value, g_cos, g_alpha = _contrastive_core(
        z, batch.labels, cfg.m, cfg.tau, denominator, alpha=alpha)

    # alpha[:, j] = probs[:, col[j]]: fold columns back onto classes
    onehot = np.zeros((len(col), len(rows)))
    onehot[np.arange(len(col)), col] = 1.0
    g_probs = g_alpha @ onehot
    g_logits = probs * (g_probs - np.sum(probs * g_probs, axis=1, keepdims=True))

    grad_z = (g_cos + g_cos.T) @ z + g_logits @ centroids
    grad_cv[rows] = g_logits.T @ z
    return LossReport(value, _tangent(grad_z, z), grad_class_vectors=grad_cv).check_finite()


# ----------------------------------------------------------------------------
# classification and combined losses


def aam_softmax_loss(batch: EmbeddingBatch, weights: ClassifierWeights,
                     cfg: MarginConfig = MarginConfig(), margin_type="angular"):
    """Margin softmax over scaled cosine logits, averaged over anchors.

    ``margin_type="angular"`` uses s*cos(theta_y + m) for the true class,
    ``"cosine"`` uses s*(cos(theta_y) - m).
    """
    z, labels, w = batch.data, batch.labels, weights.weights
    n_classes = w.shape[0]
    out = (labels < 0) | (labels >= n_classes)
    if out.any():
        raise LabelRangeError(int(labels[out][0]), n_classes)
    n = len(labels)
    rows = np.arange(n)

    cos, inside = clamp_cos(z @ w.T)
    target = cos[rows, labels]
    if margin_type == "angular":
        phi, dphi = _margin_and_slope(target, cfg.m)
    elif margin_type == "cosine":
        phi, dphi = target - cfg.m, np.ones_like(target)
    else:
        raise DataError(f"unknown margin type {margin_type!r}")

    logits = cfg.s * cos
    logits[rows, labels] = cfg.s * phi
    lse = _logsumexp_rows(logits)
    value = float(np.mean(lse - logits[rows, labels]))

    g_logits = np.exp(logits - lse[:, None])
    g_logits[rows, labels] -= 1.0
    g_cos = g_logits * (cfg.s / n)
    g_cos[rows, labels] *= dphi
    g_cos = np.where(inside, g_cos, 0.0)

    return LossReport(
        value,
        _tangent(g_cos @ w, z),
        grad_classifier_weights=_tangent(g_cos.T @ z, w),
    ).check_finite()


def caa_margin_con_loss(batch: EmbeddingBatch, weights: ClassifierWeights,
                        table: ClassVectorTable, cfg: MarginConfig = MarginConfig(),
                        lambdas=(1.0, 1.0), attention=True, contrastive_margin=None,
                        denominator="negatives_only"):
    """lambda1 * AAM-softmax + lambda2 * CAA-weighted margin contrastive term.

    ``attention=False`` and ``contrastive_margin=0.0`` give the "w/o CAA" and
    "w/o Margin" ablations; the classification margin is always ``cfg.m``.
    The component values are kept in ``parts``.
    """
    lam1, lam2 = (float(x) for x in lambdas)
    if lam1 < 0 or lam2 < 0:
        raise DataError(f"loss weights must be nonnegative, got {lambdas}")
    con_cfg = cfg if contrastive_margin is None else MarginConfig(
        m=contrastive_margin, tau=cfg.tau, s=cfg.s)
    cls = aam_softmax_loss(batch, weights, cfg)
    con = caa_contrastive_loss(batch, table, con_cfg, attention, denominator)
    return LossReport(
        value=lam1 * cls.value + lam2 * con.value,
        grad_embeddings=lam1 * cls.grad_embeddings + lam2 * con.grad_embeddings,
        grad_class_vectors=lam2 * con.grad_class_vectors,
        grad_classifier_weights=lam1 * cls.grad_classifier_weights,
        parts={"classification": cls.value, "contrastive": con.value},
    ).check_finite()
