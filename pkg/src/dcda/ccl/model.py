"""Dual-model wiring, the staged joint objective and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from ..errors import ShapeError, StateError
from ..types import ImageBatch, LossReport, Mask, ProbMap, Stage, TrainPhase
from .losses import ccl_loss, seg_loss
from .unet import SegModel


@dataclass(frozen=True)
class Ablations:
    no_fs: bool = False
    no_seg_after_tau: bool = False
    no_ccl: bool = False
    # lets the consistency terms push gradients into F^S as well
    bidirectional_ccl: bool = False


@dataclass
class CclBatchWiring:
    """Model outputs for one batch.

    ``f_t_yhat`` and ``f_s_x`` descend from x's content (y_hat was generated
    from C_X); ``f_t_y`` and ``f_s_xhat`` descend from y's.
    """

    gt_x: Mask
    f_s_x: Optional[ProbMap] = None
    f_s_xhat: Optional[ProbMap] = None
    f_t_y: Optional[ProbMap] = None
    f_t_yhat: Optional[ProbMap] = None
    lineage: tuple = ()


def _same_shape(*batches: ImageBatch):
    shapes = {tuple(b.pixels.shape) for b in batches}
    if len(shapes) != 1:
        raise ShapeError(f"batches disagree in shape: {sorted(shapes)}")


def needed_outputs(phase: TrainPhase, ablations: Ablations = Ablations()) -> set:
    """Which of the four model outputs ``joint_loss`` will read for this phase."""
    a = ablations
    if not phase.consistency_active:
        return set() if a.no_fs else {"f_s_x"}
    out = set()
    if not a.no_seg_after_tau:
        out |= {"f_t_yhat"} if a.no_fs else {"f_s_x", "f_t_yhat"}
    if not a.no_ccl and not a.no_fs:
        out |= {"f_s_x", "f_s_xhat", "f_t_y", "f_t_yhat"}
    return out


def teacher_only_outputs(phase: TrainPhase, ablations: Ablations = Ablations()) -> set:
    """Outputs that only ever serve as detached teachers (safe to compute without grad)."""
    if ablations.bidirectional_ccl or not phase.consistency_active:
        return set()
    out = {"f_s_xhat"}
    if ablations.no_seg_after_tau:
        out.add("f_s_x")
    return out


def wire_batch(f_s: Optional[SegModel], f_t: Optional[SegModel], x: ImageBatch, y: ImageBatch,
               x_hat: Optional[ImageBatch], y_hat: Optional[ImageBatch], gt_x: Mask,
               outputs=None, no_grad=()) -> CclBatchWiring:
    """Feed x, x_hat to F^S and y, y_hat to F^T.

    ``outputs`` restricts which of the four ProbMaps are computed (all by
    default); names in ``no_grad`` are computed without building a graph.
    Each input goes through its model separately, so normalization
    statistics never mix domains.
    """
    outputs = {"f_s_x", "f_s_xhat", "f_t_y", "f_t_yhat"} if outputs is None else set(outputs)
    present = [b for b in (x, y, x_hat, y_hat) if b is not None]
    _same_shape(*present)
    if gt_x.labels.shape != x.pixels.shape[:1] + x.pixels.shape[2:]:
        raise ShapeError("ground truth does not match x")
    w = CclBatchWiring(gt_x=gt_x, lineage=(("f_t_yhat", "f_s_x", x.ids), ("f_t_y", "f_s_xhat", y.ids)))
    plan = {"f_s_x": (f_s, x), "f_s_xhat": (f_s, x_hat), "f_t_y": (f_t, y), "f_t_yhat": (f_t, y_hat)}
    for name in ("f_s_x", "f_s_xhat", "f_t_y", "f_t_yhat"):
        if name not in outputs:
            continue
        model, batch = plan[name]
        if model is None or batch is None:
            raise StateError(f"{name} requested but its model or input is missing")
        with torch.set_grad_enabled(torch.is_grad_enabled() and name not in no_grad):
            setattr(w, name, model(batch))
    return w


def joint_loss(wiring: CclBatchWiring, phase: TrainPhase, ablations: Ablations = Ablations()):
    """Staged objective: Dice on F^S alone up to tau, then Dice + consistency terms.

    Returns ``(loss, report)``.  ``loss`` is None when every term has been
    switched off, so callers can skip the optimizer step entirely.
    """
    if phase.stage is Stage.DRST_PRETRAIN:
        raise StateError("joint_loss is undefined during style-transfer pretraining")
    a = ablations
    terms = {}
    if not phase.consistency_active:
        if not a.no_fs:
            terms["seg_source"] = seg_loss(wiring.f_s_x, wiring.gt_x)
    else:
        detach = not a.bidirectional_ccl
        if not a.no_seg_after_tau:
            if not a.no_fs:
                terms["seg_source"] = seg_loss(wiring.f_s_x, wiring.gt_x)
            terms["seg_target"] = seg_loss(wiring.f_t_yhat, wiring.gt_x)
        if not a.no_ccl and not a.no_fs:
            terms["ccl"] = (ccl_loss(wiring.f_t_yhat, wiring.f_s_x, detach)
                            + ccl_loss(wiring.f_t_y, wiring.f_s_xhat, detach))
    loss = sum(terms.values()) if terms else None
    values = {k: v.item() for k, v in terms.items()}
    values["joint"] = loss.item() if loss is not None else 0.0
    return loss, LossReport(values, epoch=phase.epoch, phase=phase)


@torch.no_grad()
def predict(model: SegModel, images: ImageBatch) -> Mask:
    """Per-pixel argmax; an exact tie goes to background."""
    was_training = model.training
    model.eval()
    try:
        probs = model(images).probs
    finally:
        model.train(was_training)
    return probs_to_mask(probs)


def probs_to_mask(probs) -> Mask:
    p = probs.probs if isinstance(probs, ProbMap) else probs
    return Mask((p[:, 1] > p[:, 0]).to(torch.uint8))
