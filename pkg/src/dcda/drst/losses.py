"""Adversarial, cycle-consistency and content-adversarial objectives."""
from __future__ import annotations

import torch

from ..errors import RangeError, ShapeError

EPS = 1e-7


def _clamped(p: torch.Tensor, name: str) -> torch.Tensor:
    d = p.detach()
    if torch.isnan(d).any() or (d < 0).any() or (d > 1).any():
        raise RangeError(f"{name} must lie in [0, 1]")
    return p.clamp(EPS, 1 - EPS)


def adv_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Batch-mean of ``log D(real) + log(1 - D(fake))``.

    This is the quantity the discriminator maximizes; it is always <= 0.
    """
    real = _clamped(torch.as_tensor(d_real), "d_real")
    fake = _clamped(torch.as_tensor(d_fake), "d_fake")
    return torch.log(real).mean() + torch.log1p(-fake).mean()


def generator_adv_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator surrogate: ``-mean log D(fake)``."""
    return -torch.log(_clamped(d_fake, "d_fake")).mean()


def cycle_loss(x, x_rec, y, y_rec) -> torch.Tensor:
    """Per-pixel mean L1 reconstruction error, summed over both directions."""
    x, x_rec, y, y_rec = (getattr(t, "pixels", t) for t in (x, x_rec, y, y_rec))
    if x.shape != x_rec.shape or y.shape != y_rec.shape:
        raise ShapeError("reconstructions must match the originals' shape")
    return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()


def _bce(p: torch.Tensor, target: float) -> torch.Tensor:
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def content_adv_loss(dc_on_cx: torch.Tensor, dc_on_cy: torch.Tensor):
    """Return ``(discriminator_loss, encoder_loss)`` for the content discriminator.

    The discriminator labels source content 0 and target content 1.  The
    encoders are trained toward 0.5 targets on both sides, whose optimum is
    ``2 * log 2`` at chance.
    """
    cx = _clamped(dc_on_cx, "dc_on_cx")
    cy = _clamped(dc_on_cy, "dc_on_cy")
    d_loss = _bce(cx, 0.0) + _bce(cy, 1.0)
    e_loss = _bce(cx, 0.5) + _bce(cy, 0.5)
    return d_loss, e_loss
