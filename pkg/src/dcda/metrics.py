"""Dice, 95th-percentile Hausdorff distance, aggregation and the paired t-test."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats
from scipy.ndimage import distance_transform_edt

from .errors import DegenerateError, ShapeError


def _as_bool(mask) -> np.ndarray:
    if hasattr(mask, "labels"):
        mask = mask.labels
    if hasattr(mask, "detach"):
        mask = mask.detach().cpu().numpy()
    a = np.asarray(mask)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"expected a single 2-D mask, got shape {a.shape}")
    return a.astype(bool)


def _pair(pred, gt):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    """Dice in percent; two empty masks score 100."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(p, g).sum()) / total


def hd95(pred, gt) -> Optional[float]:
    """Pooled bidirectional 95th-percentile Hausdorff distance in pixels.

    Distances run between pixel centres of the full masks.  Returns None
    (undefined) when either mask is empty.
    """
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return None
    to_g = distance_transform_edt(~g)[p]
    to_p = distance_transform_edt(~p)[g]
    return float(np.percentile(np.concatenate([to_g, to_p]), 95))


def paired_ttest(a, b) -> float:
    """Two-tailed p-value of the paired Student t statistic (n - 1 dof)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ShapeError("need two equal-length sequences with at least two values")
    d = a - b
    if np.all(d == d[0]):
        raise DegenerateError("all paired differences are equal; t is undefined")
    n = len(d)
    t = d.mean() / (d.std(ddof=1) / math.sqrt(n))
    if t == 0:
        return 1.0
    return float(2 * stats.t.sf(abs(t), df=n - 1))


@dataclass
class EvalResult:
    per_image: list = field(default_factory=list)  # dicts with id, dice, hd95 (None = undefined)

    def _defined(self, key):
        return np.array([r[key] for r in self.per_image if r[key] is not None], dtype=np.float64)

    @property
    def mean_dice(self) -> float:
        v = self._defined("dice")
        return float(v.mean()) if len(v) else math.nan

    @property
    def std_dice(self) -> float:
        v = self._defined("dice")
        return float(v.std()) if len(v) else math.nan

    @property
    def mean_hd95(self) -> Optional[float]:
        v = self._defined("hd95")
        return float(v.mean()) if len(v) else None

    @property
    def std_hd95(self) -> Optional[float]:
        v = self._defined("hd95")
        return float(v.std()) if len(v) else None

    @property
    def hd95_undefined(self) -> int:
        return sum(r["hd95"] is None for r in self.per_image)

    def summary(self) -> str:
        hd = "undefined" if self.mean_hd95 is None else f"{self.mean_hd95:.2f}±{self.std_hd95:.2f}"
        return f"Dice {self.mean_dice:.2f}±{self.std_dice:.2f}  HD95 {hd}"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "dice", "hd95"])
            for r in self.per_image:
                w.writerow([r["id"], f"{r['dice']:.6f}", "" if r["hd95"] is None else f"{r['hd95']:.6f}"])
            hd_mean = "" if self.mean_hd95 is None else f"{self.mean_hd95:.6f}"
            hd_std = "" if self.std_hd95 is None else f"{self.std_hd95:.6f}"
            w.writerow(["mean", f"{self.mean_dice:.6f}", hd_mean])
            w.writerow(["std", f"{self.std_dice:.6f}", hd_std])


def evaluate_masks(ids, preds, gts) -> EvalResult:
    """Score predictions against labels; rows are sorted by id so input order never matters."""
    rows = [{"id": i, "dice": dice_score(p, g), "hd95": hd95(p, g)} for i, p, g in zip(ids, preds, gts)]
    return EvalResult(sorted(rows, key=lambda r: str(r["id"])))


def evaluate(model, data, domain=None, invert: bool = False, image_size: int | None = None,
             batch_size: int = 16, return_predictions: bool = False):
    """Run ``model`` over held-out images and score against their labels.

    ``data`` is a DatasetManifest (its TEST split for ``domain`` is loaded,
    defaulting to the target domain) or an already loaded DomainData.
    ``model`` is a SegModel or any callable mapping an ImageBatch to a Mask.
    """
    import torch

    from .ccl.model import predict
    from .data.dataset import DatasetManifest, load_eval_set
    from .types import DomainTag

    if isinstance(data, DatasetManifest):
        if image_size is None:
            raise ValueError("image_size is required when evaluating from a manifest")
        data = load_eval_set(data, domain or DomainTag.TARGET, image_size, invert)
    preds = []
    for lo in range(0, len(data), batch_size):
        batch = data.batch(range(lo, min(lo + batch_size, len(data))))
        mask = predict(model, batch) if isinstance(model, torch.nn.Module) else model(batch)
        preds.extend(mask.labels.cpu().numpy())
    result = evaluate_masks(data.ids, preds, data.labels.cpu().numpy())
    if return_predictions:
        return result, dict(zip(data.ids, preds))
    return result
