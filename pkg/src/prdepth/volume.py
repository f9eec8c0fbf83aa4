"""Probability-volume operations on ``D x H x W`` logit/probability grids.

Plane labels returned here are 1-based to match :mod:`prdepth.planes`.
"""

from __future__ import annotations

import os
from typing import Optional, Sequence, Tuple

import numpy as np

from prdepth import imageio
from prdepth.autodiff import box_mean
from prdepth.planes import DepthPlaneSet

DEFAULT_RADIUS = 4
DEFAULT_EPS = 1e-4


def softmax_volume(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def argmax_plane(probs: np.ndarray) -> np.ndarray:
    """1-based index of the most probable plane; ties go to the smaller label."""
    return np.argmax(probs, axis=0) + 1


def confidence(probs: np.ndarray) -> np.ndarray:
    return np.max(probs, axis=0)


def reconstruct_from_probs(probs: np.ndarray, r_pred: np.ndarray, planes: DepthPlaneSet) -> np.ndarray:
    """Expected plane depth plus the residual scaled by the gap at the argmax plane."""
    probs = np.asarray(probs, dtype=np.float64)
    r_pred = np.asarray(r_pred, dtype=np.float64)
    if probs.shape[0] != planes.D:
        raise ValueError(f"volume has {probs.shape[0]} channels, planes have {planes.D}")
    if probs.shape[1:] != r_pred.shape:
        raise ValueError(f"residual shape {r_pred.shape} does not match volume {probs.shape[1:]}")
    expected = np.tensordot(planes.depths, probs, axes=(0, 0))
    idx = np.argmax(probs, axis=0)
    step = np.where(r_pred >= 0, planes.up_gaps[idx], planes.down_gaps[idx])
    return expected + r_pred * step


def reconstruct_depth(logits: np.ndarray, r_pred: np.ndarray, planes: DepthPlaneSet) -> np.ndarray:
    """Depth from a logit volume and a residual map.

    Pass guided-filter output as ``logits`` to get the refined reconstruction.
    """
    return reconstruct_from_probs(softmax_volume(logits), r_pred, planes)


def guided_filter(
    logits: np.ndarray,
    guide: np.ndarray,
    radius: int = DEFAULT_RADIUS,
    eps: float = DEFAULT_EPS,
) -> np.ndarray:
    """Channel-wise guided filter of ``logits`` steered by ``guide``.

    Windows are ``(2 * radius + 1)`` squares clipped at the border, and every
    mean divides by the number of pixels actually inside the window.
    """
    logits = np.asarray(logits, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    if logits.shape != guide.shape or logits.ndim != 3:
        raise ValueError(f"guide {guide.shape} and logits {logits.shape} must both be D x H x W")
    check_filter_params(logits.shape[1:], radius, eps)

    mean_i = box_mean(guide, radius)
    mean_l = box_mean(logits, radius)
    cov = box_mean(guide * logits, radius) - mean_i * mean_l
    var = box_mean(guide * guide, radius) - mean_i * mean_i
    a = cov / (var + eps)
    b = mean_l - a * mean_i
    return box_mean(a, radius) * guide + box_mean(b, radius)


def check_filter_params(hw: Sequence[int], radius: int, eps: float) -> None:
    if radius < 1:
        raise ValueError("filter radius must be at least 1")
    if eps <= 0:
        raise ValueError("filter eps must be positive")
    if radius > min(hw) // 2:
        raise ValueError(f"radius {radius} exceeds half the image extent {tuple(hw)}")


def _header_path(path) -> str:
    return os.fspath(path) + ".hdr"


def save_volume(path, volume: np.ndarray, depths: Optional[Sequence[float]] = None) -> None:
    """Write ``D`` stacked PFM images plus a one-line ``<path>.hdr`` sidecar.

    The sidecar reads ``D H W`` followed by the plane depths when known.
    """
    volume = np.asarray(volume)
    D, H, W = volume.shape
    imageio.write_pfm_stack(path, volume)
    fields = [str(D), str(H), str(W)]
    if depths is not None:
        fields += [repr(float(d)) for d in depths]
    with open(_header_path(path), "w") as f:
        f.write(" ".join(fields) + "\n")


def load_volume(path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    volume = imageio.read_pfm_stack(path).astype(np.float64)
    try:
        with open(_header_path(path)) as f:
            fields = f.readline().split()
    except FileNotFoundError:
        return volume, None
    if len(fields) < 3:
        raise imageio.ImageFormatError("volume header needs D H W")
    dims = tuple(int(v) for v in fields[:3])
    if dims != volume.shape:
        raise imageio.ImageFormatError(f"volume header says {dims}, payload is {volume.shape}")
    depths = np.array([float(v) for v in fields[3:]]) if len(fields) > 3 else None
    if depths is not None and depths.size != dims[0]:
        raise imageio.ImageFormatError("volume header lists the wrong number of plane depths")
    return volume, depths
