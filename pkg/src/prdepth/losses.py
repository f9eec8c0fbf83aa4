"""Training losses: L1 depth, two-stage plane cross-entropy, confidence-weighted residual L1.

All terms reduce by the mean over valid pixels. Inputs may be numpy arrays
or autodiff tensors; results are tensors so they can be back-propagated.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from prdepth import autodiff as ad
from prdepth.autodiff import Tensor

DEFAULT_LAMBDA = 0.7

LOG_COLUMNS = ("step", "L_D", "L_P", "L_R", "total", "mean_confidence")


def _mask(mask, shape) -> np.ndarray:
    mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match {shape}")
    if not mask.any():
        raise ValueError("mask has no valid pixels")
    return mask


def depth_loss(pred, gt, mask=None) -> Tensor:
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return ad.masked_mean(ad.abs(ad.sub(gt, pred)), _mask(mask, gt.shape))


def cross_entropy(logits, gt_planes: np.ndarray, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[gt]`` over valid pixels; labels are 1-based."""
    logits = ad.as_tensor(logits)
    gt_planes = np.asarray(gt_planes)
    mask = _mask(mask, gt_planes.shape)
    D = logits.shape[0]
    labels = gt_planes[mask]
    if labels.size and (labels.min() < 1 or labels.max() > D):
        raise ValueError(f"plane labels must lie in [1, {D}] on valid pixels")
    return ad.masked_mean(ad.cross_entropy_channels(logits, gt_planes - 1), mask)


def plane_ce_loss(logits, refined_logits, gt_planes, mask=None, lam: float = DEFAULT_LAMBDA) -> Tensor:
    initial = cross_entropy(logits, gt_planes, mask)
    refined = cross_entropy(refined_logits, gt_planes, mask)
    return ad.add(ad.mul(initial, lam), refined)


def residual_loss(r_pred, r_gt, conf, mask=None) -> Tensor:
    """Confidence-weighted L1 of residuals. ``conf`` is a constant weight."""
    r_pred, r_gt = ad.as_tensor(r_pred), ad.as_tensor(r_gt)
    conf = conf.data if isinstance(conf, Tensor) else np.asarray(conf, dtype=np.float64)
    if not (r_pred.shape == r_gt.shape == conf.shape):
        raise ValueError("residual, ground truth and confidence maps differ in shape")
    weighted = ad.mul(ad.abs(ad.sub(r_gt, r_pred)), conf)
    return ad.masked_mean(weighted, _mask(mask, r_gt.shape))


@dataclass
class LossReport:
    L_D: float
    L_P: float
    L_R: float
    total: float
    valid_pixel_count: int = 0
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)


def total_loss(L_D, L_P, L_R, D: int, valid_pixel_count: int = 0) -> LossReport:
    """``L_D + L_P + L_R / D``; the differentiable sum is kept on ``graph``."""
    L_D, L_P, L_R = (ad.as_tensor(t) for t in (L_D, L_P, L_R))
    total = ad.add(ad.add(L_D, L_P), ad.mul(L_R, 1.0 / D))
    return LossReport(
        L_D=L_D.item(),
        L_P=L_P.item(),
        L_R=L_R.item(),
        total=total.item(),
        valid_pixel_count=int(valid_pixel_count),
        graph=total,
    )


class LossLog:
    """Appends one CSV row per training step."""

    def __init__(self, path: str | os.PathLike):
        self.path = path
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, step: int, report: LossReport, mean_confidence: float) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(
                [step, repr(report.L_D), repr(report.L_P), repr(report.L_R), repr(report.total), repr(mean_confidence)]
            )


def read_loss_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in rows]
