"""Compound Dice + cross-entropy objective.

The Dice term is the global ratio over all classes (background included) and
all voxels, not a per-class average.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-5
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    dice: float = 1.0
    ce: float = 1.0

    def __post_init__(self):
        if self.dice < 0 or self.ce < 0:
            raise ValueError(f"loss weights must be >= 0, got dice={self.dice}, ce={self.ce}")


def _check_pair(s: torch.Tensor, g: torch.Tensor) -> None:
    if s.shape != g.shape:
        raise ValueError(f"probability shape {tuple(s.shape)} != target shape {tuple(g.shape)}")


def dice_loss(s: torch.Tensor, g: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """``1 - (2 sum g*s + eps) / (sum g + sum s + eps)`` over every class and voxel."""
    _check_pair(s, g)
    inter = (g * s).sum()
    denom = g.sum() + s.sum()
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def cross_entropy(s: torch.Tensor, g: torch.Tensor, floor: float = PROB_FLOOR) -> torch.Tensor:
    """``-(1/N) sum g * log s`` with N the voxel count (batch included)."""
    _check_pair(s, g)
    n_voxels = s.numel() // s.shape[1]
    return -(g * torch.log(s.clamp_min(floor))).sum() / n_voxels


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """``(B, X, Y, Z)`` integer labels to ``(B, C, X, Y, Z)`` one-hot floats."""
    labels = labels.long()
    if labels.numel():
        hi = int(labels.max())
        lo = int(labels.min())
        if hi >= num_classes or lo < 0:
            bad = hi if hi >= num_classes else lo
            raise ValueError(f"label value {bad} outside 0..{num_classes - 1}")
    return F.one_hot(labels, num_classes).movedim(-1, 1)


def dice_ce(logits: torch.Tensor, labels: torch.Tensor,
            weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of the Dice and cross-entropy losses for raw logits."""
    if labels.dim() == logits.dim():
        labels = labels.squeeze(1)
    g = one_hot(labels, logits.shape[1]).to(logits.dtype)
    s = torch.softmax(logits, dim=1)
    return weights.dice * dice_loss(s, g) + weights.ce * cross_entropy(s, g)
