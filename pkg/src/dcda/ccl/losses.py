"""Dice segmentation loss and soft-target cross-entropy consistency loss."""
from __future__ import annotations

import torch

from ..errors import ShapeError
from ..types import Mask, ProbMap

DICE_SMOOTH = 1.0
EPS = 1e-7


def _probs(p):
    return p.probs if isinstance(p, ProbMap) else p


def _labels(g):
    return g.labels if isinstance(g, Mask) else g


def seg_loss(pred, gt, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Smoothed Dice loss on the vessel channel, pooled over the whole batch."""
    probs, labels = _probs(pred), _labels(gt)
    if probs.shape[0] != labels.shape[0] or probs.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(f"prediction {tuple(probs.shape)} and mask {tuple(labels.shape)} disagree")
    p = probs[:, 1]
    g = labels.to(p.dtype)
    inter = (p * g).sum()
    return 1 - (2 * inter + smooth) / (p.sum() + g.sum() + smooth)


def ccl_loss(student, teacher, detach_teacher: bool = True) -> torch.Tensor:
    """Pixel-mean cross-entropy of ``student`` against soft ``teacher`` targets.

    By default the teacher is detached, so no gradient ever reaches it.
    """
    s, t = _probs(student), _probs(teacher)
    if detach_teacher:
        t = t.detach()
    if s.shape != t.shape:
        raise ShapeError(f"student {tuple(s.shape)} and teacher {tuple(t.shape)} disagree")
    return -(t * torch.log(s.clamp(EPS, 1.0))).sum(dim=1).mean()
