"""Domain types and tensor-shape contracts shared by every module.

Images live in ``[0, 1]`` with a single channel.  Segmentation outputs are
two-class probability maps (background, vessel) produced by a softmax.
"""
from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import NonFiniteError, RangeError, ShapeError

NUM_CLASSES = 2
RANGE_TOL = 1e-6
PROB_SUM_TOL = 1e-5

# Global ProbMap assertion hook; the test suite switches it on.
CHECK_PROBS = os.environ.get("DCDA_CHECK_PROBS", "0") == "1"


def set_prob_checks(enabled: bool) -> None:
    global CHECK_PROBS
    CHECK_PROBS = bool(enabled)


class DomainTag(enum.Enum):
    SOURCE = "source"
    TARGET = "target"

    @property
    def other(self) -> "DomainTag":
        return DomainTag.TARGET if self is DomainTag.SOURCE else DomainTag.SOURCE


class Stage(enum.Enum):
    DRST_PRETRAIN = 0
    SOURCE_PRETRAIN = 1
    JOINT = 2


@dataclass(frozen=True)
class TrainPhase:
    stage: Stage
    epoch: int = 0
    tau: int = 0

    def __post_init__(self):
        if self.epoch < 0 or self.tau < 0:
            raise ValueError("epoch and tau must be non-negative")

    def advance(self, stage: Stage | None = None, epoch: int | None = None) -> "TrainPhase":
        """Return the next phase; stages may only move forward."""
        stage = self.stage if stage is None else stage
        if stage.value < self.stage.value:
            raise ValueError(f"cannot go back from {self.stage.name} to {stage.name}")
        return TrainPhase(stage, self.epoch if epoch is None else epoch, self.tau)

    @property
    def consistency_active(self) -> bool:
        return self.stage is Stage.JOINT and self.epoch > self.tau


@dataclass(frozen=True)
class ImageBatch:
    pixels: torch.Tensor  # [N, 1, H, W]
    domain: DomainTag
    ids: tuple = ()

    def __post_init__(self):
        if not self.ids:
            object.__setattr__(self, "ids", tuple(f"{self.domain.value}-{i}" for i in range(self.pixels.shape[0])))
        else:
            object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]

    def with_pixels(self, pixels: torch.Tensor, domain: DomainTag | None = None) -> "ImageBatch":
        return ImageBatch(pixels, self.domain if domain is None else domain, self.ids)


@dataclass(frozen=True)
class ContentMap:
    features: torch.Tensor  # [N, C_c, H_c, W_c]
    source_domain: DomainTag


@dataclass(frozen=True)
class StyleCode:
    code: torch.Tensor  # [N, d_s]
    source_domain: DomainTag


@dataclass(frozen=True)
class Mask:
    labels: torch.Tensor  # [N, H, W] in {0, 1}

    def __post_init__(self):
        if self.labels.dim() != 3:
            raise ShapeError(f"mask must be [N, H, W], got {tuple(self.labels.shape)}")


@dataclass(frozen=True)
class ProbMap:
    probs: torch.Tensor  # [N, K, H, W]

    def __post_init__(self):
        if CHECK_PROBS:
            check_probs(self.probs)

    @property
    def vessel(self) -> torch.Tensor:
        return self.probs[:, 1]

    def detach(self) -> "ProbMap":
        return ProbMap(self.probs.detach())


LOSS_KEYS = ("adv_x", "adv_y", "content_adv", "cyc", "seg_source", "seg_target", "ccl", "joint")


@dataclass
class LossReport:
    values: dict = field(default_factory=dict)
    epoch: int = 0
    phase: Optional[TrainPhase] = None

    def __post_init__(self):
        unknown = set(self.values) - set(LOSS_KEYS)
        if unknown:
            raise KeyError(f"unknown loss names: {sorted(unknown)}")
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise NonFiniteError(f"loss {k} is not finite: {v}")

    def __getitem__(self, key):
        return self.values[key]

    def as_record(self) -> dict:
        rec = {"stage": self.phase.stage.name if self.phase else None, "epoch": self.epoch}
        rec.update({k: self.values[k] for k in LOSS_KEYS if k in self.values})
        return rec


def check_probs(probs: torch.Tensor) -> None:
    if probs.dim() != 4 or probs.shape[1] != NUM_CLASSES:
        raise ShapeError(f"ProbMap must be [N, {NUM_CLASSES}, H, W], got {tuple(probs.shape)}")
    p = probs.detach()
    if not torch.isfinite(p).all():
        raise NonFiniteError("ProbMap contains non-finite values")
    if (p < 0).any() or (p > 1).any():
        raise RangeError("ProbMap entries outside [0, 1]")
    err = (p.sum(dim=1) - 1).abs().max().item()
    if err > PROB_SUM_TOL:
        raise RangeError(f"ProbMap rows do not sum to one (max error {err:.2e})")


def validate_batch(batch: ImageBatch) -> ImageBatch:
    px = batch.pixels
    if px.dim() != 4 or px.shape[1] != 1:
        raise ShapeError(f"expected [N, 1, H, W], got {tuple(px.shape)}")
    if px.shape[0] < 1:
        raise ShapeError("empty batch")
    if px.shape[2] != px.shape[3]:
        raise ShapeError(f"images must be square, got {px.shape[2]}x{px.shape[3]}")
    if len(batch.ids) != px.shape[0]:
        raise ShapeError("ids do not match batch size")
    p = px.detach()
    if not torch.isfinite(p).all():
        raise NonFiniteError("batch contains non-finite pixels")
    if p.min().item() < -RANGE_TOL or p.max().item() > 1 + RANGE_TOL:
        raise RangeError("pixel values outside [0, 1]")
    return batch


def normalize_probs(logits: torch.Tensor) -> ProbMap:
    if not torch.isfinite(logits.detach()).all():
        raise NonFiniteError("logits contain non-finite values")
    return ProbMap(torch.softmax(logits, dim=1))


def stack_masks(masks: Sequence[torch.Tensor]) -> Mask:
    return Mask(torch.stack(list(masks)).to(torch.uint8))
