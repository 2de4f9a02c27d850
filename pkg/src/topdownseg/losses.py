"""Training objectives: cross entropy, peer, uncertainty, diversity.

All losses take probabilities, not logits, because the teacher-student
aggregation averages decoder outputs with normalized response maps and
both must live on the same [0, 1] scale. Probabilities are clamped away
from {0, 1} before any log so a saturated prediction cannot produce an
infinite loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from topdownseg.pseudolabels import IGNORE_LABEL

CLAMP_LO = 1e-7
CLAMP_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights; alpha is the value used by total_loss.

    The peer coefficient ramps linearly from alpha_start at the first
    epoch of a round to alpha_end at its last epoch, endpoints included;
    a single-epoch round sits at the end value.
    """

    alpha: float = 0.03
    omega1: float = 1.0
    omega2: float = 0.3
    alpha_start: float = 0.03
    alpha_end: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "omega1", "omega2", "alpha_start", "alpha_end"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def alpha_at(self, epoch: int, total_epochs: int) -> float:
        if total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
        if not 0 <= epoch < total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
        if total_epochs == 1:
            return self.alpha_end
        t = epoch / (total_epochs - 1)
        return self.alpha_start + (self.alpha_end - self.alpha_start) * t


def _as_batched(probs: torch.Tensor, labels: torch.Tensor):
    if probs.dim() == 3:
        probs = probs[None]
        labels = labels[None]
    if probs.dim() != 4 or labels.dim() != 3:
        raise ValueError(
            f"expected (B, K, H, W) probs with (B, H, W) labels, got {tuple(probs.shape)} / {tuple(labels.shape)}"
        )
    if probs.shape[0] != labels.shape[0] or probs.shape[2:] != labels.shape[1:]:
        raise ValueError(
            f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} disagree"
        )
    return probs, labels


def loss_ce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the labeled class.

    labels: integer grid; 255 marks ignored pixels, which contribute
    nothing to the mean. Rejects when every pixel is ignored.
    """
    if not isinstance(labels, torch.Tensor):
        labels = torch.from_numpy(np.ascontiguousarray(labels))
    labels = labels.long()
    probs, labels = _as_batched(probs, labels)
    k = probs.shape[1]
    mask = labels != IGNORE_LABEL
    if not bool(mask.any()):
        raise ValueError("every pixel is ignored; cross entropy undefined")
    if bool((labels[mask] < 0).any()) or bool((labels[mask] >= k).any()):
        raise ValueError(f"labels outside [0, {k}) present")
    safe = labels.masked_fill(~mask, 0)
    picked = probs.gather(1, safe[:, None]).squeeze(1)
    logs = picked.clamp(CLAMP_LO, CLAMP_HI).log()
    return -logs[mask].mean()


def shuffle_labels(labels, k: int, seed: int):
    """Apply one uniformly drawn permutation of {0..k-1} to a label grid.

    The permutation may be the identity; ignored pixels keep their 255.
    Accepts a numpy array or torch tensor and returns the same kind.
    """
    if k < 2:
        raise ValueError(f"label shuffling needs k >= 2, got {k}")
    perm = np.random.default_rng(seed).permutation(k)
    table = np.arange(IGNORE_LABEL + 1, dtype=np.int64)
    table[:k] = perm
    is_tensor = isinstance(labels, torch.Tensor)
    arr = labels.cpu().numpy() if is_tensor else np.asarray(labels)
    values = np.unique(arr)
    bad = values[(values >= k) & (values != IGNORE_LABEL)]
    if bad.size or (values < 0).any():
        raise ValueError(f"label values outside [0, {k}) present")
    out = table[arr.astype(np.int64)].astype(arr.dtype)
    return torch.from_numpy(out) if is_tensor else out


def loss_peer(
    probs: torch.Tensor, labels, shuffled_labels, alpha: float
) -> torch.Tensor:
    """CE against the bootstrapped labels minus alpha times CE against
    their shuffled counterpart."""
    return loss_ce(probs, labels) - alpha * loss_ce(probs, shuffled_labels)


def loss_uncertainty(probs: torch.Tensor) -> torch.Tensor:
    """One minus the mean top-2 probability gap over all locations."""
    channel = 0 if probs.dim() == 3 else 1
    if probs.dim() not in (3, 4):
        raise ValueError(f"expected (K, h, w) or (B, K, h, w), got {tuple(probs.shape)}")
    if probs.shape[channel] < 2:
        raise ValueError("uncertainty needs at least two classes")
    top2 = torch.topk(probs, 2, dim=channel).values
    gap = top2.select(channel, 0) - top2.select(channel, 1)
    return 1.0 - gap.mean()


def loss_diversity(embeddings: torch.Tensor) -> torch.Tensor:
    """One plus the mean of all K^2 scaled Gram entries of the class
    embedding matrix, diagonal included: 1 + (1/K^2) sum(C C^T) / sqrt(d)."""
    if embeddings.dim() != 2:
        raise ValueError(f"expected (K, d) embeddings, got {tuple(embeddings.shape)}")
    if not bool(torch.isfinite(embeddings).all()):
        raise ValueError("embeddings contain non-finite values")
    k, d = embeddings.shape
    gram_sum = (embeddings @ embeddings.transpose(0, 1)).sum()
    return 1.0 + gram_sum / math.sqrt(d) / (k * k)


def total_loss(
    probs: torch.Tensor,
    labels,
    shuffled_labels,
    embeddings: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """loss_peer + omega1 * loss_diversity + omega2 * loss_uncertainty."""
    return (
        loss_peer(probs, labels, shuffled_labels, weights.alpha)
        + weights.omega1 * loss_diversity(embeddings)
        + weights.omega2 * loss_uncertainty(probs)
    )
