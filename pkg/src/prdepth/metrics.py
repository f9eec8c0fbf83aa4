"""Depth-completion error metrics over a validity mask."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

# predictions are clamped to this before inversion
MIN_INVERSE_DEPTH = 1e-6


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    rel: float
    irmse: float  # 1/m
    imae: float  # 1/m
    delta1: float  # percent
    delta2: float
    delta3: float
    n: int

    def columns(self) -> list[str]:
        return [f.name for f in fields(self)]

    def row(self, inverse_scale: float = 1.0) -> list:
        values = asdict(self)
        values["irmse"] *= inverse_scale
        values["imae"] *= inverse_scale
        return [values[c] for c in self.columns()]

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerow([repr(v) if isinstance(v, float) else v for v in self.row()])
        return buf.getvalue().strip()

    def table(self, inverse_unit: str = "1/m") -> str:
        scale = 1000.0 if inverse_unit == "1/km" else 1.0
        lines = [
            f"RMSE   {self.rmse:12.6f} m",
            f"MAE    {self.mae:12.6f} m",
            f"REL    {self.rel:12.6f}",
            f"iRMSE  {self.irmse * scale:12.6f} {inverse_unit}",
            f"iMAE   {self.imae * scale:12.6f} {inverse_unit}",
            f"d1     {self.delta1:12.4f} %",
            f"d2     {self.delta2:12.4f} %",
            f"d3     {self.delta3:12.4f} %",
            f"pixels {self.n:12d}",
        ]
        return "\n".join(lines)


def evaluate(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> MetricsReport:
    """Compare ``pred`` against ``gt`` on ``mask`` (default: ``gt > 0``).

    The delta accuracies count ratios strictly below ``1.25 ** i``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = gt > 0 if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError("mask does not match the depth maps")
    if not mask.any():
        raise ValueError("mask has no valid pixels")
    p, g = pred[mask], gt[mask]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive on the mask")

    err = p - g
    inv_err = 1.0 / np.maximum(p, MIN_INVERSE_DEPTH) - 1.0 / g
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(p > 0, ratio, np.inf)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(np.mean(np.abs(err))),
        rel=float(np.mean(np.abs(err) / g)),
        irmse=float(np.sqrt(np.mean(inv_err**2))),
        imae=float(np.mean(np.abs(inv_err))),
        delta1=float(100.0 * np.mean(ratio < 1.25)),
        delta2=float(100.0 * np.mean(ratio < 1.25**2)),
        delta3=float(100.0 * np.mean(ratio < 1.25**3)),
        n=int(mask.sum()),
    )
