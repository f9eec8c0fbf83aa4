"""Gradient-check cases shared by the autodiff and acceptance tests."""

import numpy as np

from prdepth import autodiff as ad

GRAD_TOL = 1e-6
N_POINTS = 20


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def weighted(op):
    """Scalar test loss sum(op(...) * R) with a fixed random projection R."""
    cache = {}

    def fn(*ts):
        y = op(*ts)
        if "R" not in cache:
            cache["R"] = np.random.default_rng(99).normal(size=y.shape)
        return ad.sum_all(ad.mul(y, cache["R"]))

    return fn


# (name, op, input factory)
OPS = [
    ("relu", ad.relu, lambda r: [_away_from_zero(r, (2, 4, 4))]),
    ("abs", ad.abs, lambda r: [_away_from_zero(r, (2, 4, 4))]),
    ("scaled_tanh", ad.scaled_tanh, lambda r: [r.normal(size=(2, 4, 4))]),
    ("add", ad.add, lambda r: [r.normal(size=(3, 4, 4)), r.normal(size=(3, 1, 1))]),
    ("sub", ad.sub, lambda r: [r.normal(size=(3, 4, 4)), r.normal(size=(4, 4))]),
    ("mul", ad.mul, lambda r: [r.normal(size=(3, 4, 4)), r.normal(size=(3, 4, 4))]),
    ("div", ad.div, lambda r: [r.normal(size=(3, 4, 4)), r.uniform(0.5, 2.0, (3, 4, 4))]),
    ("mean", ad.mean, lambda r: [r.normal(size=(2, 3, 3))]),
    ("sum_channels", ad.sum_channels, lambda r: [r.normal(size=(4, 3, 3))]),
    ("max_channels", ad.max_channels, lambda r: [r.normal(size=(4, 3, 3))]),
    ("softmax_channels", ad.softmax_channels, lambda r: [r.normal(size=(4, 3, 3))]),
    ("reshape", lambda x: ad.reshape(x, (3, 6)), lambda r: [r.normal(size=(2, 3, 3))]),
    (
        "concat_channels",
        lambda a, b: ad.concat_channels([a, b]),
        lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(3, 3, 3))],
    ),
    ("avgpool_r1", lambda x: ad.avgpool(x, 1), lambda r: [r.normal(size=(2, 6, 5))]),
    ("avgpool_r2", lambda x: ad.avgpool(x, 2), lambda r: [r.normal(size=(2, 6, 5))]),
    (
        "cross_entropy",
        lambda x: ad.cross_entropy_channels(x, np.array([[0, 1, 2], [3, 3, 0], [1, 2, 1]])),
        lambda r: [r.normal(size=(4, 3, 3))],
    ),
    (
        "masked_mean",
        lambda x: ad.masked_mean(x, np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1]], bool)),
        lambda r: [r.normal(size=(3, 3))],
    ),
    (
        "conv2d",
        lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1),
        lambda r: [r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
    ),
    (
        "conv2d_stride2",
        lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1),
        lambda r: [r.normal(size=(2, 6, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
    ),
    (
        "deconv2d",
        lambda x, w, b: ad.deconv2d(x, w, b, stride=2, padding=0),
        lambda r: [r.normal(size=(3, 3, 3)), r.normal(size=(3, 2, 2, 2)), r.normal(size=2)],
    ),
    (
        "deconv2d_k3_pad1",
        lambda x, w, b: ad.deconv2d(x, w, b, stride=2, padding=1),
        lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(2, 2, 3, 3)), r.normal(size=2)],
    ),
]


def worst_error(op, make, points=N_POINTS):
    """Largest gradcheck error of ``op`` over ``points`` seeded random inputs."""
    worst = 0.0
    for point in range(points):
        rng = np.random.default_rng(1000 + point)
        inputs = [ad.Tensor(a) for a in make(rng)]
        worst = max(worst, ad.gradcheck(weighted(op), inputs, h=1e-5))
    return worst
