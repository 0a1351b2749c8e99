"""Dataset splits, evaluation of trained states and the loss ablation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .config import DataConfig, TrainConfig
from .encoder import encode
from .losses import EmbeddingBatch
from .metrics import DcfParams, alignment_uniformity, eer, min_dcf, score_trials
from .synth import Dataset, SpeakerModel, TrialList, augment, generate_dataset, make_trials
from .trainer import TrainState, fit

# (row label, TrainConfig overrides); margin ablation touches the contrastive term only
VARIANTS = (
    ("CAAMarginCon", {}),
    ("w/o Margin", {"contrastive_m": 0.0}),
    ("w/o CAA", {"attention": False}),
    ("w/o CAA and Margin", {"attention": False, "contrastive_m": 0.0}),
)
CONDITIONS = ("clean", "outlier")
EVAL_AUG_SEED = 12345


@dataclass
class Split:
    """Dataset with the last ``eval_utts`` utterances of each speaker held out."""

    dataset: Dataset
    is_eval: np.ndarray
    trials: TrialList

    @property
    def train_features(self):
        return self.dataset.features[~self.is_eval]

    @property
    def train_labels(self):
        return self.dataset.labels[~self.is_eval]

    @property
    def eval_ids(self):
        return [u for u, e in zip(self.dataset.utt_ids, self.is_eval) if e]

    @property
    def eval_features(self):
        return self.dataset.features[self.is_eval]

    @property
    def eval_labels(self):
        return self.dataset.labels[self.is_eval]


def speaker_model(data: DataConfig, outlier_rate=None):
    rate = data.outlier_rate if outlier_rate is None else outlier_rate
    return SpeakerModel(data.d_in, data.spread, rate, data.outlier_shift, data.radius)


def held_out_mask(labels, eval_utts):
    """Mark the last ``eval_utts`` utterances (in row order) of every speaker."""
    labels = np.asarray(labels)
    mask = np.zeros(len(labels), dtype=bool)
    for spk in np.unique(labels):
        rows = np.flatnonzero(labels == spk)
        mask[rows[len(rows) - eval_utts:]] = True
    return mask


def make_split(data: DataConfig, seed=None, outlier_rate=None):
    seed = data.data_seed if seed is None else seed
    ds = generate_dataset(data.n_speakers, data.utts_per_speaker,
                          speaker_model(data, outlier_rate), seed)
    is_eval = held_out_mask(ds.labels, data.eval_utts)
    ids = [u for u, e in zip(ds.utt_ids, is_eval) if e]
    trials = make_trials(ds.labels[is_eval], data.n_target, data.n_nontarget, seed, ids)
    return Split(ds, is_eval, trials)


def evaluate(state: TrainState, features, labels, ids, trials, dcf: DcfParams,
             cfg: TrainConfig):
    """EER / minDCF on cosine-scored trials plus alignment and uniformity.

    Alignment uses one augmented view per utterance drawn with a fixed seed.
    """
    z, _ = encode(state.encoder, features)
    scored = score_trials(dict(zip(ids, z)), trials)
    eer_value, eer_threshold = eer(scored)
    dcf_value, dcf_threshold = min_dcf(scored, dcf)
    views = augment(features, cfg.aug_noise, cfg.aug_dropout, seed=EVAL_AUG_SEED)
    zv, _ = encode(state.encoder, views)
    align, uniform = alignment_uniformity(EmbeddingBatch.from_views(z, zv, labels, check=False))
    return {
        "eer": eer_value,
        "eer_threshold": eer_threshold,
        "min_dcf": dcf_value,
        "min_dcf_threshold": dcf_threshold,
        "alignment": align,
        "uniformity": uniform,
        "n_target": int(scored.targets.sum()),
        "n_nontarget": int((~scored.targets).sum()),
    }


def dcf_params(data: DataConfig):
    return DcfParams(data.p_target, data.c_miss, data.c_fa)


def train_and_evaluate(cfg: TrainConfig, split: Split, dcf: DcfParams):
    state, history = fit(split.train_features, split.train_labels, cfg)
    metrics = evaluate(state, split.eval_features, split.eval_labels, split.eval_ids,
                       split.trials, dcf, cfg)
    return state, history, metrics


@dataclass
class AblationRun:
    variant: str
    condition: str
    seed: int
    metrics: dict
    initial_loss: float
    final_loss: float


def run_ablation(cfg: TrainConfig, data: DataConfig, seeds) -> List[AblationRun]:
    """Train every variant on clean and outlier-injected data for each seed.

    Seed ``k`` uses data seed ``data.data_seed + k`` and training seed
    ``cfg.seed + k``; all variants share both.
    """
    cfg = cfg.replace(loss="caa_margin_con")
    runs = []
    for k in seeds:
        for condition in CONDITIONS:
            rate = 0.0 if condition == "clean" else data.outlier_rate
            split = make_split(data, data.data_seed + k, rate)
            for name, overrides in VARIANTS:
                vcfg = cfg.replace(seed=cfg.seed + k, **overrides)
                _, history, metrics = train_and_evaluate(vcfg, split, dcf_params(data))
                first = history[0].means["loss"] if history else float("nan")
                last = history[-1].means["loss"] if history else float("nan")
                runs.append(AblationRun(name, condition, k, metrics, first, last))
    return runs


def summarize_ablation(runs: List[AblationRun]):
    """Mean EER / minDCF per (variant, condition) in table order."""
    rows = []
    for name, _ in VARIANTS:
        for condition in CONDITIONS:
            sel = [r for r in runs if r.variant == name and r.condition == condition]
            rows.append({
                "variant": name,
                "condition": condition,
                "seeds": len(sel),
                "eer": float(np.mean([r.metrics["eer"] for r in sel])),
                "min_dcf": float(np.mean([r.metrics["min_dcf"] for r in sel])),
                "loss_decreased": all(r.final_loss < r.initial_loss for r in sel),
            })
    return rows
