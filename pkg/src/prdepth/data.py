"""Synthetic piecewise-planar scenes, sparse sampling and the on-disk dataset layout.

Layout::

    <root>/scene_0000/rgb.ppm     8-bit RGB
    <root>/scene_0000/depth.pfm   dense ground truth, meters
    <root>/scene_0000/sparse.pfm  sampled depth, 0 = no measurement
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from prdepth import imageio


@dataclass
class SceneParams:
    n_rects: int = 4
    depth_min: float = 1.0
    depth_max: float = 5.0
    slant: bool = True

    def validate(self) -> None:
        if self.n_rects < 0:
            raise ValueError("n_rects must be non-negative")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")


@dataclass
class Scene:
    rgb: np.ndarray  # 3 x H x W in [0, 1]
    depth_gt: np.ndarray  # H x W meters
    meta: dict = field(default_factory=dict)
    sparse: np.ndarray | None = None


def synth_scene(seed: int, H: int = 64, W: int = 64, params: SceneParams | None = None) -> Scene:
    """Background plane at ``depth_max`` with nearer, optionally slanted rectangles.

    Colour is a per-region albedo darkened with distance, so image edges line
    up with depth edges.
    """
    params = params or SceneParams()
    params.validate()
    if H < 16 or W < 16:
        raise ValueError("scenes must be at least 16x16")
    rng = np.random.default_rng(seed)
    lo, hi = params.depth_min, params.depth_max

    depth = np.full((H, W), hi)
    region = np.zeros((H, W), dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    for k in range(1, params.n_rects + 1):
        h = int(rng.integers(H // 6, H // 2 + 1))
        w = int(rng.integers(W // 6, W // 2 + 1))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        base = rng.uniform(lo, lo + 0.85 * (hi - lo))
        gy, gx = rng.uniform(-1.0, 1.0, size=2) * (0.25 * (hi - lo) / max(H, W))
        if not params.slant:
            gy = gx = 0.0
        cy, cx = top + h / 2.0, left + w / 2.0
        plane = np.clip(base + gy * (yy - cy) + gx * (xx - cx), lo, hi)
        inside = np.zeros((H, W), dtype=bool)
        inside[top:top + h, left:left + w] = True
        nearer = inside & (plane < depth)
        depth[nearer] = plane[nearer]
        region[nearer] = k

    albedo = rng.uniform(0.3, 1.0, size=(params.n_rects + 1, 3))
    shade = 1.0 - 0.6 * (depth - lo) / (hi - lo)
    rgb = np.transpose(albedo[region], (2, 0, 1)) * shade[None]
    meta = {
        "seed": seed,
        "H": H,
        "W": W,
        "n_rects": params.n_rects,
        "depth_min": lo,
        "depth_max": hi,
        "slant": params.slant,
    }
    return Scene(rgb=np.clip(rgb, 0.0, 1.0), depth_gt=depth, meta=meta)


def sample_sparse(depth: np.ndarray, K: int, seed: int) -> np.ndarray:
    """Keep ``K`` distinct uniformly chosen pixels of ``depth``; zero elsewhere."""
    depth = np.asarray(depth)
    n = depth.size
    if not 0 <= K <= n:
        raise ValueError(f"cannot sample {K} of {n} pixels")
    rng = np.random.default_rng(seed)
    picks = rng.choice(n, size=K, replace=False)
    sparse = np.zeros(n, dtype=depth.dtype)
    sparse[picks] = depth.reshape(-1)[picks]
    return sparse.reshape(depth.shape)


def scene_dir(root, index: int) -> Path:
    return Path(root) / f"scene_{index:04d}"


def write_scene(path, scene: Scene) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    imageio.write_ppm(path / "rgb.ppm", imageio.rgb_to_uint8(scene.rgb))
    imageio.write_pfm(path / "depth.pfm", scene.depth_gt)
    if scene.sparse is not None:
        imageio.write_pfm(path / "sparse.pfm", scene.sparse)


def read_scene(path) -> Scene:
    """Load one scene directory. Values come back as float64 in their stored precision."""
    path = Path(path)
    rgb = imageio.uint8_to_rgb(imageio.read_ppm(path / "rgb.ppm"))
    depth = imageio.read_pfm(path / "depth.pfm").astype(np.float64)
    sparse = None
    if (path / "sparse.pfm").exists():
        sparse = imageio.read_pfm(path / "sparse.pfm").astype(np.float64)
    if rgb.shape[1:] != depth.shape or (sparse is not None and sparse.shape != depth.shape):
        raise imageio.ImageFormatError(f"image sizes disagree in {path}")
    return Scene(rgb=rgb, depth_gt=depth, meta={"path": os.fspath(path)}, sparse=sparse)


def list_scenes(root) -> List[Path]:
    return sorted(p for p in Path(root).glob("scene_*") if p.is_dir())


def load_dataset(root) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``(rgb, sparse, gt_depth)`` triples for every scene under ``root``."""
    out = []
    for path in list_scenes(root):
        scene = read_scene(path)
        if scene.sparse is None:
            raise FileNotFoundError(f"{path} has no sparse.pfm")
        out.append((scene.rgb, scene.sparse, scene.depth_gt))
    return out
