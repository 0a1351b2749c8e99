"""Verification scoring (EER, minDCF) and embedding geometry measures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, UnknownSpeakerError, ZeroNormError


@dataclass
class ScoredTrials:
    scores: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=bool)
        if self.scores.shape != self.targets.shape or self.scores.ndim != 1:
            raise DataError("scores and target flags must be equal-length 1-D sequences")
        if not self.scores.size:
            raise DataError("no scored trials")

    def require_both_classes(self):
        if self.targets.all() or not self.targets.any():
            raise DataError("scored trials need at least one target and one nontarget")


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise DataError(f"p_target={self.p_target} outside (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise DataError("detection costs must be positive")


def score_trials(embeddings, trials):
    """Cosine score per trial; ``embeddings`` maps utterance id -> vector."""
    scores, targets = [], []
    for t in trials:
        try:
            a, b = embeddings[t.enroll], embeddings[t.test]
        except KeyError as exc:
            raise UnknownSpeakerError(exc.args[0], "embedding set") from None
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ZeroNormError(t.enroll if na == 0 else t.test, "trial embedding")
        scores.append(float(np.dot(a, b) / (na * nb)))
        targets.append(t.target)
    return ScoredTrials(np.array(scores), np.array(targets, dtype=bool))


def operating_points(scored: ScoredTrials):
    """Miss / false-alarm rates for 'accept if score >= t'.

    Thresholds are the distinct scores in ascending order followed by +inf,
    so the first point accepts everything and the last accepts nothing.
    """
    scored.require_both_classes()
    order = np.argsort(scored.scores, kind="stable")
    s = scored.scores[order]
    tgt = scored.targets[order]
    n_t = tgt.sum()
    n_n = tgt.size - n_t
    # group ties: boundaries where a new distinct score starts
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    below_t = np.r_[0, np.cumsum(tgt)][starts]
    below_n = np.r_[0, np.cumsum(~tgt)][starts]
    thresholds = np.r_[s[starts], np.inf]
    p_miss = np.r_[below_t, n_t] / n_t
    p_fa = 1.0 - np.r_[below_n, n_n] / n_n
    return thresholds, p_miss, p_fa


def _interpolated_eer(thresholds, p_miss, p_fa):
    diff = p_fa - p_miss  # nonincreasing, +1 at the start and -1 at the end
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0 or k == 0:
        return float(p_miss[k]), float(thresholds[k])
    d0, d1 = diff[k - 1], diff[k]
    w = d0 / (d0 - d1)
    eer = (1 - w) * p_miss[k - 1] + w * p_miss[k]
    t1 = thresholds[k] if np.isfinite(thresholds[k]) else thresholds[k - 1]
    return float(eer), float((1 - w) * thresholds[k - 1] + w * t1)


def eer(scored: ScoredTrials):
    """Equal error rate (fraction) and the threshold where it occurs.

    Linear interpolation between the two operating points that straddle
    the crossing of the miss and false-alarm curves.
    """
    return _interpolated_eer(*operating_points(scored))


def min_dcf(scored: ScoredTrials, params: DcfParams = DcfParams()):
    """Minimum normalized detection cost and its threshold."""
    thresholds, p_miss, p_fa = operating_points(scored)
    cost = params.c_miss * params.p_target * p_miss + params.c_fa * (1 - params.p_target) * p_fa
    norm = min(params.c_miss * params.p_target, params.c_fa * (1 - params.p_target))
    k = int(np.argmin(cost))
    return float(cost[k] / norm), float(thresholds[k])


def alignment_uniformity(batch, alpha=2.0, t=2.0):
    """Alignment over view pairs and uniformity over all distinct row pairs.

    alignment = mean ||z_orig - z_aug||^alpha, uniformity =
    log mean exp(-t ||z_i - z_j||^2).
    """
    z = batch.data
    orig, aug = batch.view_pairs()
    align = float(np.mean(np.linalg.norm(z[orig] - z[aug], axis=1) ** alpha))
    i, j = np.triu_indices(len(z), k=1)
    sq = np.sum((z[i] - z[j]) ** 2, axis=1)
    # log-mean-exp with the usual max shift
    x = -t * sq
    top = x.max()
    uniform = float(top + np.log(np.mean(np.exp(x - top))))
    return align, uniform
