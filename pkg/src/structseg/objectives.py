"""Training losses (focal + soft Dice) and volumetric evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from .errors import ShapeError

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    gamma: float = 2.0
    w_focal: float = 1.0
    w_dice: float = 1.0
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.w_focal < 0 or self.w_dice < 0 or (self.w_focal == 0 and self.w_dice == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def focal_loss(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean over pixels of -(1 - p_t)^gamma * log(p_t). Reduces to BCE at gamma=0."""
    _check_shapes(probs, target)
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_t = torch.where(target > 0.5, p, 1.0 - p)
    return (-((1.0 - p_t) ** gamma) * torch.log(p_t)).mean()


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice over the whole mask: 1 - (2*sum(p*y)+s) / (sum(p)+sum(y)+s)."""
    _check_shapes(probs, target)
    inter = (probs * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + target.sum() + smooth)


def dice_loss_per_sample(probs: torch.Tensor, target: torch.Tensor,
                         smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice per leading-dim sample, averaged. Inputs (B, ...)."""
    _check_shapes(probs, target)
    p = probs.flatten(1)
    y = target.flatten(1)
    inter = (p * y).sum(dim=1)
    dice = (2.0 * inter + smooth) / (p.sum(dim=1) + y.sum(dim=1) + smooth)
    return (1.0 - dice).mean()


def combined_loss(logits: torch.Tensor, target: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """w_focal * focal + w_dice * dice on sigmoid(logits).

    Batched inputs (leading dim) get per-sample Dice; unbatched inputs are a
    single mask.
    """
    _check_shapes(logits, target)
    probs = torch.sigmoid(logits)
    loss = logits.new_zeros(())
    if cfg.w_focal:
        loss = loss + cfg.w_focal * focal_loss(probs, target, cfg.gamma)
    if cfg.w_dice:
        if logits.ndim >= 3:
            loss = loss + cfg.w_dice * dice_loss_per_sample(probs, target, cfg.dice_smooth)
        else:
            loss = loss + cfg.w_dice * dice_loss(probs, target, cfg.dice_smooth)
    return loss


def volume_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Tuple[np.ndarray, float]:
    """Per-foreground-class IoU over a full 3D volume and their mean.

    Background (0) is excluded. A class absent from both volumes counts as
    IoU 1 (perfect agreement on absence).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    ious = np.empty(num_classes, dtype=np.float64)
    for c in range(1, num_classes + 1):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        ious[c - 1] = 1.0 if union == 0 else np.logical_and(p, g).sum() / union
    return ious, float(ious.mean()) if num_classes else 1.0
