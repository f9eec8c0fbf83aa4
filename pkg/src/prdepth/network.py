"""Toy dual-decoder plane-residual network and its SGD training loop.

Topology, for ``encoder_depth = n`` and ``b = base_channels``::

    rgb ──conv── ┐
    planes─conv──┼─ concat ─ enc0 (b) ─ enc1 (2b, /2) ─ ... ─ enc_n (2^n b, /2^n)
    resid──conv──┘
    decoder P: deconv x2 per stage, + encoder feature of the same scale ─ conv ─ D logits
    decoder R: deconv x2 per stage, + decoder-P feature of the same scale ─ conv ─ 0.5 tanh
    guidance:  rgb ─ conv ─ relu ─ conv ─ D channels

The refined logits are the channel-wise guided filter of the logits by the
guidance image, and depth comes from the refined logits plus the residual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from prdepth import autodiff as ad
from prdepth import losses, planes as pr, volume
from prdepth.autodiff import Tape, Tensor

log = logging.getLogger(__name__)

Params = Dict[str, Tensor]


@dataclass
class ToyPRNetConfig:
    D: int = 8
    base_channels: int = 16
    encoder_depth: int = 3
    filter_radius: int = volume.DEFAULT_RADIUS
    filter_eps: float = volume.DEFAULT_EPS
    lam: float = losses.DEFAULT_LAMBDA
    use_filter: bool = True
    use_confidence: bool = True
    seed: int = 0
    strategy: str = "UR"
    plane_d_min: float = 0.0
    plane_d_max: float = 10.0
    # heavy-ball momentum; 0 is plain SGD
    momentum: float = 0.0

    def validate(self, H: Optional[int] = None, W: Optional[int] = None) -> None:
        if self.D < 2:
            raise ValueError("D must be at least 2")
        if self.base_channels < 1 or self.encoder_depth < 1:
            raise ValueError("base_channels and encoder_depth must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        pr.Strategy(self.strategy)
        if H is not None and W is not None:
            f = 2**self.encoder_depth
            if H % f or W % f:
                raise ValueError(f"image {H}x{W} is not divisible by {f}")
            if self.use_filter:
                volume.check_filter_params((H, W), self.filter_radius, self.filter_eps)

    def make_planes(self, sparse: np.ndarray) -> pr.DepthPlaneSet:
        return pr.make_planes(self.strategy, self.D, self.plane_d_min, self.plane_d_max, sparse=sparse)


@dataclass
class ForwardOutputs:
    logits: Tensor  # D x H x W
    refined_logits: Tensor  # D x H x W
    residual: Tensor  # 1 x H x W
    guidance: Tensor  # D x H x W
    depth_pred: Tensor  # H x W
    planes: pr.DepthPlaneSet


class TrainingDiverged(RuntimeError):
    pass


# --- parameters ------------------------------------------------------------


def param_shapes(config: ToyPRNetConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every tensor; conv weights are out x in x k x k, deconv in x out x k x k."""
    b, D, n = config.base_channels, config.D, config.encoder_depth
    width = [b * 2**i for i in range(n + 1)]
    shapes: Dict[str, Tuple[int, ...]] = {}

    def conv(name, c_out, c_in, k=3):
        shapes[f"{name}.w"] = (c_out, c_in, k, k)
        shapes[f"{name}.b"] = (c_out,)

    def deconv(name, c_in, c_out, k=2):
        shapes[f"{name}.w"] = (c_in, c_out, k, k)
        shapes[f"{name}.b"] = (c_out,)

    conv("stem_rgb", b, 3)
    conv("stem_plane", b, D)
    conv("stem_residual", b, 1)
    conv("enc0", width[0], 3 * b)
    for i in range(1, n + 1):
        conv(f"enc{i}", width[i], width[i - 1])
    for dec in ("dec_p", "dec_r"):
        for i in range(n, 0, -1):
            deconv(f"{dec}{i}", width[i], width[i - 1])
    conv("head_p", D, b)
    conv("head_r", 1, b)
    conv("guide1", b, 3)
    conv("guide2", D, b)
    return shapes


def init_params(config: ToyPRNetConfig) -> Params:
    """Glorot-uniform weights, zero biases, drawn in a fixed order from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            a, c, k, _ = shape
            deconv = name.startswith("dec_")
            c_in, c_out = (a, c) if deconv else (c, a)
            limit = np.sqrt(6.0 / (c_in * k * k + c_out * k * k))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def params_from_arrays(arrays: Dict[str, np.ndarray], config: ToyPRNetConfig) -> Params:
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ValueError(f"checkpoint does not match config (missing {missing}, unexpected {extra})")
    params: Params = {}
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != shape:
            raise ValueError(f"{name}: checkpoint shape {arrays[name].shape}, config expects {shape}")
        params[name] = Tensor(arrays[name], requires_grad=True, name=name)
    return params


def params_to_arrays(params: Params) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


# --- forward ---------------------------------------------------------------


def _conv(params: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return ad.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=1)


def _deconv(params: Params, name: str, x: Tensor) -> Tensor:
    return ad.deconv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=2, padding=0)


def guided_filter(logits: Tensor, guide: Tensor, radius: int, eps: float) -> Tensor:
    """Differentiable counterpart of :func:`prdepth.volume.guided_filter`."""
    mean_i = ad.avgpool(guide, radius)
    mean_l = ad.avgpool(logits, radius)
    cov = ad.sub(ad.avgpool(ad.mul(guide, logits), radius), ad.mul(mean_i, mean_l))
    var = ad.sub(ad.avgpool(ad.mul(guide, guide), radius), ad.mul(mean_i, mean_i))
    a = ad.div(cov, ad.add(var, eps))
    b = ad.sub(mean_l, ad.mul(a, mean_i))
    return ad.add(ad.mul(ad.avgpool(a, radius), guide), ad.avgpool(b, radius))


def reconstruct(logits: Tensor, r_pred: Tensor, planes: pr.DepthPlaneSet) -> Tensor:
    """Differentiable counterpart of :func:`prdepth.volume.reconstruct_depth`.

    The argmax plane and the side of the residual are treated as constants.
    """
    probs = ad.softmax_channels(logits)
    expected = ad.sum_channels(ad.mul(probs, planes.depths[:, None, None]))
    idx = np.argmax(probs.data, axis=0)
    step = np.where(r_pred.data >= 0, planes.up_gaps[idx], planes.down_gaps[idx])
    return ad.add(expected, ad.mul(r_pred, step))


def network_input(sparse: np.ndarray, planes: pr.DepthPlaneSet) -> np.ndarray:
    """(D + 1)-channel PR input: plane one-hot mask stacked on the residual map."""
    plane_mask, residual_map = pr.sparse_to_network_input(sparse, planes)
    return np.concatenate([plane_mask, residual_map[None]], axis=0)


def forward(
    params: Params,
    rgb: np.ndarray,
    sparse_input: np.ndarray,
    config: ToyPRNetConfig,
    planes: pr.DepthPlaneSet,
) -> ForwardOutputs:
    rgb = np.asarray(rgb, dtype=np.float64)
    sparse_input = np.asarray(sparse_input, dtype=np.float64)
    D, n = config.D, config.encoder_depth
    _, H, W = rgb.shape
    if sparse_input.shape != (D + 1, H, W):
        raise ValueError(f"sparse input {sparse_input.shape} should be {(D + 1, H, W)}")
    if planes.D != D:
        raise ValueError(f"plane set has {planes.D} planes, config has {D}")
    config.validate(H, W)

    rgb_t = Tensor(rgb)
    stems = [
        ad.relu(_conv(params, "stem_rgb", rgb_t)),
        ad.relu(_conv(params, "stem_plane", Tensor(sparse_input[:D]))),
        ad.relu(_conv(params, "stem_residual", Tensor(sparse_input[D:]))),
    ]
    x = ad.relu(_conv(params, "enc0", ad.concat_channels(stems)))
    skips = [x]
    for i in range(1, n + 1):
        x = ad.relu(_conv(params, f"enc{i}", x, stride=2))
        skips.append(x)

    p_feats: List[Tensor] = [None] * n
    y = skips[n]
    for i in range(n, 0, -1):
        y = ad.add(ad.relu(_deconv(params, f"dec_p{i}", y)), skips[i - 1])
        p_feats[i - 1] = y
    logits = _conv(params, "head_p", y)

    z = skips[n]
    for i in range(n, 0, -1):
        z = ad.add(ad.relu(_deconv(params, f"dec_r{i}", z)), p_feats[i - 1])
    residual = ad.scaled_tanh(_conv(params, "head_r", z))

    guidance = _conv(params, "guide2", ad.relu(_conv(params, "guide1", rgb_t)))
    if config.use_filter:
        refined = guided_filter(logits, guidance, config.filter_radius, config.filter_eps)
    else:
        refined = logits
    depth = reconstruct(refined, ad.reshape(residual, (H, W)), planes)
    return ForwardOutputs(logits, refined, residual, guidance, depth, planes)


# --- training --------------------------------------------------------------


@dataclass
class _Sample:
    rgb: np.ndarray
    net_in: np.ndarray
    gt: np.ndarray
    mask: np.ndarray
    gt_pr: pr.PRMap
    planes: pr.DepthPlaneSet
    clamped: int


def _prepare(rgb, sparse, gt, config: ToyPRNetConfig) -> _Sample:
    gt = np.asarray(gt, dtype=np.float64)
    planes = config.make_planes(sparse)
    mask = gt > 0
    gt_pr, clamped = pr.encode(gt, planes, valid=mask)
    return _Sample(np.asarray(rgb, dtype=np.float64), network_input(sparse, planes), gt, mask, gt_pr, planes, clamped)


def compute_losses(
    out: ForwardOutputs,
    sample: _Sample,
    config: ToyPRNetConfig,
    conf: Optional[np.ndarray] = None,
) -> Tuple[losses.LossReport, float]:
    """Loss report for one forward pass plus the mean confidence over the mask.

    ``conf`` overrides the confidence map, which otherwise comes from the
    refined probabilities. It is a constant either way.
    """
    mask = sample.mask
    L_D = losses.depth_loss(out.depth_pred, sample.gt, mask)
    L_P = losses.plane_ce_loss(out.logits, out.refined_logits, sample.gt_pr.plane, mask, config.lam)
    if conf is None:
        conf = volume.confidence(volume.softmax_volume(out.refined_logits.data))
    weight = conf if config.use_confidence else np.ones_like(conf)
    H, W = sample.gt.shape
    L_R = losses.residual_loss(ad.reshape(out.residual, (H, W)), sample.gt_pr.residual, weight, mask)
    report = losses.total_loss(L_D, L_P, L_R, config.D, int(mask.sum()))
    return report, float(conf[mask].mean())


def loss_for(params: Params, rgb, sparse, gt, config: ToyPRNetConfig) -> losses.LossReport:
    sample = _prepare(rgb, sparse, gt, config)
    out = forward(params, sample.rgb, sample.net_in, config, sample.planes)
    return compute_losses(out, sample, config)[0]


def train(
    dataset: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]],
    config: ToyPRNetConfig,
    steps: int,
    lr: float,
    params: Optional[Params] = None,
    log_path=None,
) -> Tuple[Params, List[losses.LossReport]]:
    """SGD with a fixed learning rate on the total loss, one scene per step in dataset order.

    With ``config.momentum = m > 0`` the update is ``v = m v + g; w -= lr v``.
    Each report is the loss at the parameters *before* that step's update.
    """
    if not dataset:
        raise ValueError("empty dataset")
    shapes = {np.asarray(gt).shape for _, _, gt in dataset}
    if len(shapes) != 1:
        raise ValueError(f"all images must share one size, got {sorted(shapes)}")
    H, W = shapes.pop()
    config.validate(H, W)
    samples = [_prepare(rgb, sparse, gt, config) for rgb, sparse, gt in dataset]
    for i, s in enumerate(samples):
        if s.clamped:
            log.info("scene %d: %d ground-truth pixels clamped to the end planes", i, s.clamped)
    params = init_params(config) if params is None else params
    writer = losses.LossLog(log_path) if log_path is not None else None

    velocity = {name: np.zeros_like(t.data) for name, t in params.items()}
    reports: List[losses.LossReport] = []
    for step in range(steps):
        sample = samples[step % len(samples)]
        for t in params.values():
            t.grad = None
        with Tape() as tape:
            out = forward(params, sample.rgb, sample.net_in, config, sample.planes)
            report, mean_conf = compute_losses(out, sample, config)
        if not np.isfinite(report.total):
            raise TrainingDiverged(f"total loss became {report.total} at step {step}")
        ad.backward(tape, report.graph)
        for name, t in params.items():
            if t.grad is None:
                continue
            if config.momentum:
                v = velocity[name]
                v *= config.momentum
                v += t.grad
                t.data -= lr * v
            else:
                t.data -= lr * t.grad
        report.graph = None
        reports.append(report)
        if writer is not None:
            writer.append(step, report, mean_conf)
    return params, reports


def infer(
    rgb: np.ndarray,
    sparse: np.ndarray,
    params: Params | Dict[str, np.ndarray],
    config: ToyPRNetConfig,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Depth, 1-based plane map and confidence map, without recording a tape."""
    if any(not isinstance(v, Tensor) for v in params.values()):
        params = params_from_arrays(params, config)
    else:
        params_from_arrays(params_to_arrays(params), config)
    planes = config.make_planes(sparse)
    out = forward(params, rgb, network_input(sparse, planes), config, planes)
    probs = volume.softmax_volume(out.refined_logits.data)
    return out.depth_pred.data.copy(), volume.argmax_plane(probs), volume.confidence(probs)


def config_fields() -> List[str]:
    return [f.name for f in fields(ToyPRNetConfig)]


def with_overrides(config: ToyPRNetConfig, **kwargs) -> ToyPRNetConfig:
    return replace(config, **kwargs)
