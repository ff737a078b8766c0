"""Soft Dice loss for training, thresholded IoU / Dice-F for evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .errors import DataValidationError

DEFAULT_EPS = 1e-6


class Scope(str, Enum):
    PER_IMAGE = "per-image"
    EPOCH_MEAN = "epoch-mean"
    SPLIT_MEAN = "split-mean"


@dataclass(frozen=True)
class MetricRecord:
    iou: float
    f_dice: float
    n_images: int = 1
    scope: Scope = Scope.PER_IMAGE

    @classmethod
    def mean_of(cls, records, scope: Scope = Scope.SPLIT_MEAN) -> "MetricRecord":
        records = list(records)
        if not records:
            return cls(float("nan"), float("nan"), 0, scope)
        return cls(
            iou=float(np.mean([r.iou for r in records])),
            f_dice=float(np.mean([r.f_dice for r in records])),
            n_images=len(records),
            scope=scope,
        )


def soft_dice_loss(pred_probs, onehot_gt, eps: float = DEFAULT_EPS, class_mean: bool = False):
    """Soft Dice loss ``1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)``.

    Inputs are channels-last, ``(..., H, W, 2)``. Sums run over every axis but
    the channel axis, so a batch is scored as one pooled volume. By default
    only the polyp channel (index 1) is scored; ``class_mean=True`` averages
    the per-channel losses instead.

    Accepts torch tensors (differentiable) or numpy arrays (returns a float).
    """
    as_numpy = not isinstance(pred_probs, torch.Tensor)
    p = torch.as_tensor(pred_probs)
    g = torch.as_tensor(onehot_gt, dtype=p.dtype, device=p.device)
    if p.shape != g.shape:
        raise DataValidationError(f"shape mismatch: pred {tuple(p.shape)} vs gt {tuple(g.shape)}")
    if p.shape[-1] < 2:
        raise DataValidationError("expected a trailing channel axis of size >= 2")

    dims = tuple(range(p.ndim - 1))
    inter = (p * g).sum(dim=dims)
    denom = p.sum(dim=dims) + g.sum(dim=dims)
    per_class = 1.0 - (2.0 * inter + eps) / (denom + eps)
    loss = per_class.mean() if class_mean else per_class[1]
    return float(loss) if as_numpy else loss


def binarize_prediction(probs) -> np.ndarray:
    """Per-pixel argmax over (background, polyp); exact ties go to background."""
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    probs = np.asarray(probs)
    return (probs[..., 1] > probs[..., 0]).astype(np.uint8)


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise DataValidationError(f"{name} mask must be binary")
    return pred.astype(bool), gt.astype(bool)


def overlap_counts(pred, gt) -> tuple[int, int, int]:
    """Return (|P & G|, |P|, |G|) as Python ints."""
    p, g = _check_pair(pred, gt)
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def iou(pred, gt) -> float:
    inter, n_p, n_g = overlap_counts(pred, gt)
    union = n_p + n_g - inter
    return 1.0 if union == 0 else inter / union


def dice_f(pred, gt) -> float:
    inter, n_p, n_g = overlap_counts(pred, gt)
    total = n_p + n_g
    return 1.0 if total == 0 else 2 * inter / total


def score(pred, gt) -> MetricRecord:
    return MetricRecord(iou=iou(pred, gt), f_dice=dice_f(pred, gt))


def oracle_metrics(pred, gt) -> tuple[float, float]:
    """Reference IoU/Dice via explicit per-pixel loops and integer counters.

    Slow by design; meant for cross-checking :func:`iou` and :func:`dice_f`
    on small masks.
    """
    rows = len(pred)
    cols = len(pred[0]) if rows else 0
    inter = union = n_p = n_g = 0
    for i in range(rows):
        for j in range(cols):
            a = int(pred[i][j]) != 0
            b = int(gt[i][j]) != 0
            if a and b:
                inter += 1
            if a or b:
                union += 1
            if a:
                n_p += 1
            if b:
                n_g += 1
    iou_v = 1.0 if union == 0 else inter / union
    dice_v = 1.0 if n_p + n_g == 0 else 2 * inter / (n_p + n_g)
    return iou_v, dice_v
