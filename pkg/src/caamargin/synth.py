"""Seeded synthetic speakers, feature-space augmentation and trial lists."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, NamedTuple

import numpy as np

from .errors import DataError, InsufficientPairsError


@dataclass(frozen=True)
class SpeakerModel:
    """Generator parameters shared by all speakers of a dataset.

    ``spread`` is the per-coordinate noise standard deviation.  With
    probability ``outlier_rate`` an utterance's mean is moved the fraction
    ``outlier_shift`` of the way toward another speaker's centroid, while
    keeping its own label.
    """

    d_in: int = 40
    spread: float = 0.6
    outlier_rate: float = 0.0
    outlier_shift: float = 0.5
    radius: float = 3.0

    def __post_init__(self):
        if self.d_in < 1:
            raise DataError(f"d_in={self.d_in} must be positive")
        if self.spread < 0:
            raise DataError(f"spread={self.spread} must be nonnegative")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise DataError(f"outlier_rate={self.outlier_rate} outside [0, 1]")
        if not 0.0 <= self.outlier_shift <= 1.0:
            raise DataError(f"outlier_shift={self.outlier_shift} outside [0, 1]")
        if self.radius < 0:
            raise DataError(f"radius={self.radius} must be nonnegative")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    utt_ids: List[str]
    seed: int
    model: SpeakerModel
    centroids: np.ndarray
    outlier: np.ndarray

    @property
    def n_speakers(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def header(self):
        return {"n": len(self.labels), "d_in": self.model.d_in, "seed": self.seed,
                "n_speakers": self.n_speakers, **asdict(self.model)}


def utt_id(speaker, index):
    return f"spk{speaker:04d}-utt{index:04d}"


def generate_dataset(n_speakers, utts_per_speaker, model: SpeakerModel = SpeakerModel(), seed=0):
    """Draw centroids on a sphere of ``model.radius`` and Gaussian utterances around them.

    Rows are grouped by speaker, in utterance order.
    """
    if n_speakers < 2:
        raise DataError(f"n_speakers={n_speakers} must be at least 2")
    if utts_per_speaker < 2:
        raise DataError(f"utts_per_speaker={utts_per_speaker} must be at least 2")
    rng = np.random.default_rng(seed)
    d = model.d_in
    directions = rng.normal(size=(n_speakers, d))
    centroids = model.radius * directions / np.linalg.norm(directions, axis=1, keepdims=True)

    labels = np.repeat(np.arange(n_speakers), utts_per_speaker)
    n = len(labels)
    noise = rng.normal(size=(n, d))
    outlier = rng.random(n) < model.outlier_rate
    # another speaker, uniformly among the n_speakers - 1 others
    other = (labels + rng.integers(1, n_speakers, size=n)) % n_speakers

    shift = np.where(outlier, model.outlier_shift, 0.0)[:, None]
    means = (1.0 - shift) * centroids[labels] + shift * centroids[other]
    features = means + model.spread * noise
    ids = [utt_id(s, k) for s in range(n_speakers) for k in range(utts_per_speaker)]
    return Dataset(features, labels, ids, seed, model, centroids, outlier)


def augment(features, noise_sigma=0.0, dropout_prob=0.0, seed=0):
    """Additive Gaussian noise followed by random coordinate dropout (zeroing)."""
    if noise_sigma < 0:
        raise DataError(f"noise_sigma={noise_sigma} must be nonnegative")
    if not 0.0 <= dropout_prob < 1.0:
        raise DataError(f"dropout_prob={dropout_prob} outside [0, 1)")
    x = np.array(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if noise_sigma > 0:
        x += noise_sigma * rng.normal(size=x.shape)
    if dropout_prob > 0:
        x[rng.random(x.shape) < dropout_prob] = 0.0
    return x


class Trial(NamedTuple):
    enroll: str
    test: str
    target: bool


class TrialList(list):
    """List of :class:`Trial` with per-class counts."""

    @property
    def n_target(self):
        return sum(t.target for t in self)

    @property
    def n_nontarget(self):
        return len(self) - self.n_target

    def to_lines(self):
        return [f"{t.enroll} {t.test} {'target' if t.target else 'nontarget'}" for t in self]

    @classmethod
    def from_lines(cls, lines):
        out = cls()
        for k, line in enumerate(lines, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise DataError(f"trial line {k}: expected 'enroll test target|nontarget'")
            out.append(Trial(parts[0], parts[1], parts[2] == "target"))
        return out


def make_trials(labels, n_target, n_nontarget, seed=0, ids=None):
    """Sample distinct same- and different-speaker utterance pairs without replacement."""
    labels = np.asarray(labels)
    n = len(labels)
    ids = [str(k) for k in range(n)] if ids is None else list(ids)
    first, second = np.triu_indices(n, k=1)
    same = labels[first] == labels[second]
    rng = np.random.default_rng(seed)
    picked = []
    for want, mask, kind in ((n_target, same, "target"), (n_nontarget, ~same, "nontarget")):
        pool = np.flatnonzero(mask)
        if want > len(pool) or want < 0:
            raise InsufficientPairsError(kind, want, len(pool))
        picked.append(np.sort(rng.choice(pool, size=want, replace=False)))
    trials = TrialList()
    for k in np.sort(np.concatenate(picked)):
        i, j = first[k], second[k]
        trials.append(Trial(ids[i], ids[j], bool(same[k])))
    return trials
