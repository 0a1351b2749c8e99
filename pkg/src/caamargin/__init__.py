"""Margin-based, class-aware-attention supervised contrastive learning in NumPy."""

__version__ = "0.1.0"

from .losses import (  # noqa: E402
    ClassifierWeights,
    ClassVectorTable,
    EmbeddingBatch,
    LossReport,
    MarginConfig,
    aam_softmax_loss,
    caa_contrastive_loss,
    caa_margin_con_loss,
    caa_scores,
    cos_plus_margin,
    cosine_similarity,
    sup_margin_con_loss,
    supcon_loss,
)

__all__ = [
    "ClassifierWeights",
    "ClassVectorTable",
    "EmbeddingBatch",
    "LossReport",
    "MarginConfig",
    "aam_softmax_loss",
    "caa_contrastive_loss",
    "caa_margin_con_loss",
    "caa_scores",
    "cos_plus_margin",
    "cosine_similarity",
    "sup_margin_con_loss",
    "supcon_loss",
]
