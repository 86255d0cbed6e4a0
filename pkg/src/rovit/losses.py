"""Symmetric batch contrastive objectives: softmax cross-entropy and sigmoid focal.

Both take L2-normalized image rows ``V`` and text rows ``L`` (B x D) plus a
temperature, form ``S = V L^T / tau`` once, and score the image-to-text
direction on ``S`` and the text-to-image direction on ``S^T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

LOSS_KINDS = ("softmax", "focal")
NORMALIZATIONS = ("as_paper", "per_pair")


@dataclass
class LossConfig:
    kind: str = "focal"
    gamma: float = 2.0
    normalize: str = "as_paper"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.normalize not in NORMALIZATIONS:
            raise ValueError(f"normalize must be one of {NORMALIZATIONS}, got {self.normalize!r}")


def _check(V, L):
    if V.ndim != 2 or V.shape != L.shape:
        raise ad.DimensionError(f"embedding batches must be matching B x D, got {V.shape} and {L.shape}")
    if V.shape[0] == 0:
        raise ValueError("empty batch")


def similarity_logits(V, L, tau) -> Tensor:
    V, L = ad.as_tensor(V), ad.as_tensor(L)
    _check(V, L)
    return ad.matmul(V, L.T) / tau


def softmax_loss_from_logits(S) -> Tensor:
    """-(1/B) sum_i log softmax(S_i)_i."""
    b = S.shape[0]
    return -(ad.log_softmax(S, axis=1) * np.eye(b)).sum() * (1.0 / b)


def focal_sum(S, gamma: float) -> Tensor:
    """Sum of focal terms over all pairs; diagonal pairs are the positives."""
    S = ad.as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ad.DimensionError(f"focal loss needs a square logit matrix, got {S.shape}")
    terms, dterms = kernels.focal_terms(np.ascontiguousarray(S.data), float(gamma))
    return ad.make_op(np.array(terms.sum()), (S,), lambda g: (g * dterms,))


def focal_loss_from_logits(S, gamma: float, normalize: str = "as_paper") -> Tensor:
    b = S.shape[0]
    denom = b if normalize == "as_paper" else b * b
    return focal_sum(S, gamma) * (1.0 / denom)


def softmax_contrastive_loss(V, L, tau) -> Tensor:
    """Image-to-text softmax cross-entropy with the diagonal as positives."""
    return softmax_loss_from_logits(similarity_logits(V, L, tau))


def focal_contrastive_loss(V, L, tau, gamma: float = 2.0, normalize: str = "as_paper") -> Tensor:
    """Image-to-text non-alpha-balanced sigmoid focal loss over all B^2 pairs.

    The true-class probability is ``sigmoid(s)`` for matching pairs and
    ``1 - sigmoid(s)`` otherwise.  ``normalize="as_paper"`` divides the B^2
    term sum by B, ``"per_pair"`` by B^2.
    """
    return focal_loss_from_logits(similarity_logits(V, L, tau), gamma, normalize)


def total_contrastive_loss(V, L, tau, cfg: LossConfig | None = None) -> Tensor:
    """I2T loss on S plus T2I loss on S^T."""
    cfg = cfg or LossConfig()
    S = similarity_logits(V, L, tau)
    if cfg.kind == "softmax":
        return softmax_loss_from_logits(S) + softmax_loss_from_logits(S.T)
    return (focal_loss_from_logits(S, cfg.gamma, cfg.normalize)
            + focal_loss_from_logits(S.T, cfg.gamma, cfg.normalize))
