"""Depth planes and the plane-residual (PR) encoding of metric depth.

A depth ``x`` is written as ``(p, r)`` with ``p`` a 1-based plane label and
``r`` the signed offset from plane ``p`` measured in units of the gap to the
neighbouring plane on the side of the offset::

    depth(p, r) = d_p + r * (d_{p+1} - d_p)   if r >= 0
    depth(p, r) = d_p + r * (d_p - d_{p-1})   if r < 0
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from prdepth import imageio

_BELOW_HALF = np.nextafter(0.5, 0.0)


class Strategy(str, enum.Enum):
    """Plane placement: Uniform or Disparity-wise spacing, Relative or Absolute anchors."""

    UR = "UR"
    UA = "UA"
    DR = "DR"
    DA = "DA"

    @property
    def relative(self) -> bool:
        return self.value.endswith("R")

    @property
    def disparity(self) -> bool:
        return self.value.startswith("D")


@dataclass(frozen=True, eq=False)
class DepthPlaneSet:
    depths: np.ndarray
    strategy: Strategy
    d_min: float
    d_max: float

    def __post_init__(self):
        depths = np.asarray(self.depths, dtype=np.float64)
        if depths.ndim != 1 or depths.size < 2:
            raise ValueError("need at least two planes")
        if not np.all(np.diff(depths) > 0):
            raise ValueError("plane depths must be strictly increasing")
        depths.setflags(write=False)
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "strategy", Strategy(self.strategy))

    @property
    def D(self) -> int:
        return int(self.depths.size)

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.depths)

    @property
    def up_gaps(self) -> np.ndarray:
        """Gap used for ``r >= 0`` at each plane; the last plane mirrors its lower gap."""
        g = self.gaps
        return np.append(g, g[-1])

    @property
    def down_gaps(self) -> np.ndarray:
        """Gap used for ``r < 0`` at each plane; the first plane mirrors its upper gap."""
        g = self.gaps
        return np.insert(g, 0, g[0])

    def to_text(self) -> str:
        depths = " ".join(repr(float(d)) for d in self.depths)
        return (
            f"strategy={self.strategy.value}\nD={self.D}\n"
            f"d_min={self.d_min!r}\nd_max={self.d_max!r}\ndepths={depths}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "DepthPlaneSet":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        try:
            depths = np.array([float(v) for v in fields["depths"].split()])
            planes = cls(
                depths=depths,
                strategy=Strategy(fields["strategy"]),
                d_min=float(fields["d_min"]),
                d_max=float(fields["d_max"]),
            )
        except KeyError as exc:
            raise ValueError(f"plane file is missing {exc}") from exc
        if "D" in fields and int(fields["D"]) != planes.D:
            raise ValueError("plane count does not match the listed depths")
        return planes


def make_planes(
    strategy: Strategy | str,
    D: int,
    d_min: Optional[float] = None,
    d_max: Optional[float] = None,
    sparse: Optional[np.ndarray] = None,
) -> DepthPlaneSet:
    """Build ``D`` plane depths.

    Relative strategies (UR, DR) take their range from the valid (positive,
    finite) samples of ``sparse``; absolute ones (UA, DA) from ``d_min`` and
    ``d_max``.
    """
    strategy = Strategy(strategy)
    if D < 2:
        raise ValueError("D must be at least 2")
    if strategy.relative:
        if sparse is None:
            raise ValueError(f"{strategy.value} planes need a sparse depth map")
        sparse = np.asarray(sparse, dtype=np.float64)
        samples = sparse[np.isfinite(sparse) & (sparse > 0)]
        if np.unique(samples).size < 2:
            raise ValueError("need at least two distinct valid sparse samples")
        d_min, d_max = float(samples.min()), float(samples.max())
    elif d_min is None or d_max is None:
        raise ValueError(f"{strategy.value} planes need d_min and d_max")
    d_min, d_max = float(d_min), float(d_max)
    if d_min >= d_max:
        raise ValueError(f"d_min ({d_min}) must be below d_max ({d_max})")

    if strategy.disparity:
        if d_min <= 0:
            raise ValueError("disparity-wise planes need d_min > 0")
        inv = np.linspace(1.0 / d_min, 1.0 / d_max, D)
        depths = np.sort(1.0 / inv)
    else:
        depths = d_min + np.arange(D) * ((d_max - d_min) / (D - 1))
    depths[0], depths[-1] = d_min, d_max
    return DepthPlaneSet(depths=depths, strategy=strategy, d_min=d_min, d_max=d_max)


def d_step(planes: DepthPlaneSet, p: int, r: float) -> float:
    """Gap between plane ``p`` and its neighbour on the side of ``r``."""
    D = planes.D
    if not 1 <= p <= D:
        raise ValueError(f"plane label {p} outside [1, {D}]")
    d = planes.depths
    if r >= 0:
        if p == D:
            if r > 0:
                raise ValueError(f"positive residual on the last plane ({r})")
            return float(d[D - 1] - d[D - 2])
        return float(d[p] - d[p - 1])
    if p == 1:
        raise ValueError(f"negative residual on the first plane ({r})")
    return float(d[p - 1] - d[p - 2])


@dataclass
class PRMap:
    """Per-pixel plane label (1..D, 0 = invalid), residual and validity."""

    plane: np.ndarray
    residual: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.plane = np.asarray(self.plane, dtype=np.int64)
        self.residual = np.asarray(self.residual, dtype=np.float64)
        if self.valid is None:
            self.valid = self.plane > 0
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.plane.shape == self.residual.shape == self.valid.shape):
            raise ValueError("plane, residual and valid maps differ in shape")

    def save(self, plane_path: str | os.PathLike, residual_path: str | os.PathLike) -> None:
        plane = np.where(self.valid, self.plane, 0)
        if plane.max(initial=0) > np.iinfo(np.uint16).max:
            raise ValueError("plane labels do not fit in 16 bits")
        imageio.write_pgm(plane_path, plane.astype(np.uint16))
        imageio.write_pfm(residual_path, np.where(self.valid, self.residual, 0.0))

    @classmethod
    def load(cls, plane_path: str | os.PathLike, residual_path: str | os.PathLike) -> "PRMap":
        plane = imageio.read_pgm(plane_path).astype(np.int64)
        residual = imageio.read_pfm(residual_path).astype(np.float64)
        if plane.shape != residual.shape:
            raise imageio.ImageFormatError("plane and residual images differ in size")
        return cls(plane=plane, residual=residual)


def encode(
    depth: np.ndarray,
    planes: DepthPlaneSet,
    valid: Optional[np.ndarray] = None,
) -> Tuple[PRMap, int]:
    """Encode a depth map as a PRMap.

    Validity defaults to ``depth > 0``. Depths outside ``[d_1, d_D]`` are
    clamped to the end planes with zero residual; the number of clamped
    pixels is returned alongside the map.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = depth > 0
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != depth.shape:
        raise ValueError("validity mask does not match the depth map")
    if not np.all(np.isfinite(depth[valid])):
        raise ValueError("depth values must be finite")

    d = planes.depths
    D = planes.D
    x = np.where(valid, depth, d[0])
    below = valid & (x < d[0])
    above = valid & (x > d[-1])
    x = np.clip(x, d[0], d[-1])

    lower = np.clip(np.searchsorted(d, x, side="right") - 1, 0, D - 2)
    gap = d[lower + 1] - d[lower]
    mid = 0.5 * (d[lower] + d[lower + 1])
    upper = x >= mid
    idx = np.where(upper, lower + 1, lower)
    r = (x - d[idx]) / gap
    r = np.where(upper, np.maximum(r, -0.5), np.minimum(r, _BELOW_HALF))

    plane = np.where(valid, idx + 1, 0)
    residual = np.where(valid & ~below & ~above, r, 0.0)
    # clamped pixels: idx already points at the end plane
    return PRMap(plane=plane, residual=residual, valid=valid), int(below.sum() + above.sum())


def decode(pr: PRMap, planes: DepthPlaneSet) -> np.ndarray:
    """Depth in meters from a PRMap; invalid pixels decode to 0."""
    D = planes.D
    p = pr.plane
    if np.any((p[pr.valid] < 1) | (p[pr.valid] > D)):
        raise ValueError(f"plane labels outside [1, {D}] on valid pixels")
    idx = np.clip(p - 1, 0, D - 1)
    r = pr.residual
    step = np.where(r >= 0, planes.up_gaps[idx], planes.down_gaps[idx])
    out = planes.depths[idx] + r * step
    return np.where(pr.valid, out, 0.0)


def sparse_to_network_input(
    sparse: np.ndarray, planes: DepthPlaneSet
) -> Tuple[np.ndarray, np.ndarray]:
    """D-channel plane mask and 1-channel residual map for a sparse depth map."""
    sparse = np.asarray(sparse, dtype=np.float64)
    pr, _ = encode(sparse, planes)
    labels = np.arange(1, planes.D + 1)[:, None, None]
    plane_mask = (pr.plane[None] == labels).astype(np.float64)
    residual_map = np.where(pr.valid, pr.residual, 0.0)
    return plane_mask, residual_map
