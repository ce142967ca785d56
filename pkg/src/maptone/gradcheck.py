"""Finite-difference verification suites for the op set and the full model."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import Discriminator, ModelConfig, Translator
from .tensor import Tensor, grad_check, make_rng
from .training import mse_loss


def _rand(rng, shape, scale=1.0, positive=False):
    data = rng.standard_normal(shape) * scale
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def ops_gradcheck(seed: int = 0, instances: int = 5, eps: float = 1e-5) -> dict:
    """Max relative error per primitive over several random instances."""
    rng = make_rng(seed)
    results: dict[str, float] = {}

    def check(name, build):
        worst = 0.0
        for _ in range(instances):
            f, params = build()
            worst = max(worst, grad_check(f, params, eps=eps, rng=rng))
        results[name] = worst

    def shape2(lo=2, hi=8):
        return tuple(int(rng.integers(lo, hi + 1)) for _ in range(2))

    def binary(op):
        def build():
            s = shape2()
            a, b = _rand(rng, s), _rand(rng, s, positive=(op is T.div))
            return (lambda: T.sum_(T.sigmoid(op(a, b)))), [a, b]
        return build

    check("add", binary(T.add))
    check("sub", binary(T.sub))
    check("mul", binary(T.mul))
    check("div", binary(T.div))

    def unary(op, positive=False, scale=1.0):
        def build():
            a = _rand(rng, shape2(), scale=scale, positive=positive)
            return (lambda: T.sum_(op(a))), [a]
        return build

    check("exp", unary(T.exp, scale=0.5))
    check("log", unary(T.log, positive=True))
    check("sqrt", unary(T.sqrt, positive=True))
    check("sigmoid", unary(T.sigmoid))
    check("relu", unary(lambda a: T.relu(a) * T.relu(a)))
    check("scalar_ops", unary(lambda a: (a * 2.5 + 1.0) / 3.0 - 0.25))

    def softmax_build():
        a = _rand(rng, shape2())
        return (lambda: T.sum_(T.softmax(a, axis=-1) * T.softmax(a, axis=-1))), [a]
    check("softmax", softmax_build)

    def matmul_build():
        m, k, n = (int(rng.integers(2, 8)) for _ in range(3))
        a, b = _rand(rng, (m, k)), _rand(rng, (k, n))
        return (lambda: T.sum_(T.sigmoid(T.matmul(a, b)))), [a, b]
    check("matmul", matmul_build)

    def batched_matmul_build():
        b_, m, k, n = (int(rng.integers(2, 6)) for _ in range(4))
        a, b = _rand(rng, (b_, m, k)), _rand(rng, (b_, k, n))
        return (lambda: T.sum_(T.sigmoid(T.matmul(a, b)))), [a, b]
    check("batched_matmul", batched_matmul_build)

    def transpose_build():
        a = _rand(rng, (3, 4, 2))
        return (lambda: T.sum_(T.transpose(a, (2, 0, 1)) * T.transpose(a, (2, 0, 1)))), [a]
    check("transpose", transpose_build)

    def reshape_build():
        a = _rand(rng, (4, 6))
        return (lambda: T.sum_(T.sigmoid(a.reshape(2, 12)))), [a]
    check("reshape", reshape_build)

    def reductions_build():
        a = _rand(rng, shape2())
        return (lambda: T.mean(a * a) + T.sum_(a, axis=0).sum() * 0.1), [a]
    check("mean_sum", reductions_build)

    def concat_build():
        a, b = _rand(rng, (3, 4)), _rand(rng, (2, 4))
        return (lambda: T.sum_(T.sigmoid(T.concat([a, b], axis=0)))), [a, b]
    check("concat", concat_build)

    def slice_build():
        a = _rand(rng, (5, 6))
        return (lambda: T.sum_(a[1:4, ::2] * a[1:4, ::2])), [a]
    check("slice", slice_build)

    def gather_build():
        a = _rand(rng, (4, 5))
        idx = rng.integers(0, 20, size=(3, 3))
        return (lambda: T.sum_(T.sigmoid(T.gather(a, idx)))), [a]
    check("gather", gather_build)

    def conv_build():
        x = _rand(rng, (2, 3, 6, 6), scale=0.5)
        w = _rand(rng, (4, 3, 3, 3), scale=0.3)
        b = _rand(rng, (4,), scale=0.1)
        return (lambda: T.mean(T.sigmoid(T.conv2d(x, w, b, stride=2, padding=1)))), [x, w, b]
    check("conv2d", conv_build)

    def deconv_build():
        x = _rand(rng, (1, 3, 4, 4), scale=0.5)
        w = _rand(rng, (3, 2, 4, 4), scale=0.3)
        b = _rand(rng, (2,), scale=0.1)
        return (lambda: T.mean(T.sigmoid(
            T.conv_transpose2d(x, w, b, stride=2, padding=1)))), [x, w, b]
    check("conv_transpose2d", deconv_build)

    def pool_build():
        nx, ny = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        a = _rand(rng, (nx, ny, 3))
        bins = (int(rng.integers(1, nx + 3)), int(rng.integers(1, ny + 3)))
        return (lambda: T.sum_(T.avg_pool_bins(a, bins) * T.avg_pool_bins(a, bins))), [a]
    check("avg_pool_bins", pool_build)

    return results


def model_gradcheck(seed: int = 0, eps: float = 1e-5, width: int = 100,
                    coords_per_param: int = 2) -> dict:
    """End-to-end checks: translator MSE loss and discriminator output.

    The MSE target sits near the untrained output so the loss offset stays
    small; a large constant offset would drown the tiny per-coordinate
    gradients of a deep graph in finite-difference rounding noise.
    """
    rng = make_rng(seed)
    cfg = ModelConfig()
    translator = Translator(cfg, seed=seed)
    h = np.abs(rng.standard_normal((20, width)))
    base = translator.forward(h)[0].data
    target = base + 0.02 * rng.standard_normal(base.shape)

    def f_translator():
        out, _ = translator.forward(h)
        return mse_loss(out, target)

    params = list(translator.parameters().values())
    err_t = grad_check(f_translator, params, eps=eps, rng=rng,
                       max_coords=coords_per_param)

    disc = Discriminator(cfg, make_rng(seed + 1))
    grids = rng.random((2, 64, 64))

    def f_disc():
        p = disc.forward(Tensor(grids))
        return T.mean((p - 0.3) * (p - 0.3))

    err_d = grad_check(f_disc, list(disc.parameters().values()), eps=eps,
                       rng=rng, max_coords=coords_per_param)
    return {"translator": err_t, "discriminator": err_d}
