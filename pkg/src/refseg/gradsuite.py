"""Finite-difference verification suite: every differentiable operation plus
the composed gated-attention -> grouped-FFN -> mask-decode path.

Used by the CLI ``gradcheck`` command and by the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import decoder as dec
from . import tensor as tz
from .encoders import VisualPyramid
from .params import named_tensors
from .tensor import GradReport, Tensor, grad_check


def _wsum(out, w):
    return tz.tensor_sum(out * Tensor(w))


def op_checks(seed: int) -> list:
    """One GradReport per differentiable tensor-core operation."""
    g = np.random.default_rng(seed)
    reports = []

    w = g.normal(size=(3, 4))
    reports.append(grad_check(lambda a, b: _wsum(tz.matmul(a, b), w),
                              [Tensor(g.normal(size=(3, 5))), Tensor(g.normal(size=(5, 4)))],
                              name="matmul"))
    w = g.normal(size=(4, 6))
    reports.append(grad_check(lambda x: _wsum(tz.softmax_last(x), w),
                              [Tensor(g.normal(size=(4, 6)))], name="softmax_last"))
    w = g.normal(size=(3, 8))
    reports.append(grad_check(
        lambda x, gn, bs: _wsum(tz.layer_norm(x, gn, bs), w),
        [Tensor(g.normal(size=(3, 8))), Tensor(g.normal(size=(8,))),
         Tensor(g.normal(size=(8,)))], name="layer_norm"))
    w = g.normal(size=(5, 7, 2))
    reports.append(grad_check(lambda x: _wsum(tz.bilinear_upsample(x, 5, 7), w),
                              [Tensor(g.normal(size=(3, 4, 2)))], name="bilinear_upsample"))
    w = g.normal(size=(4, 6))
    reports.append(grad_check(lambda x, wg: _wsum(tz.grouped_linear(x, wg, 3), w),
                              [Tensor(g.normal(size=(4, 6))), Tensor(g.normal(size=(3, 2, 2)))],
                              name="grouped_linear"))
    for name, fn in (("sigmoid", tz.sigmoid), ("relu", tz.relu), ("exp", tz.exp)):
        w = g.normal(size=(10,))
        x = g.normal(size=(10,))
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.1, x)
        reports.append(grad_check(lambda t, fn=fn: _wsum(fn(t), w), [Tensor(x)], name=name))
    w = g.normal(size=(10,))
    x = g.uniform(0.1, 3.0, size=(10,))
    reports.append(grad_check(lambda t: _wsum(tz.log(t), w), [Tensor(x)], name="log"))
    reports.append(grad_check(lambda t: _wsum(tz.sqrt(t), w), [Tensor(x)], name="sqrt"))
    x = np.where(np.abs(g.normal(size=(10,))) < 1e-3, 0.2, g.normal(size=(10,)))
    reports.append(grad_check(lambda t: _wsum(tz.absolute(t), w), [Tensor(x)], name="abs"))
    reports.append(grad_check(lambda t: _wsum(tz.power(t, 2.0), w),
                              [Tensor(g.uniform(0.1, 2.0, size=(10,)))], name="power"))
    w2 = g.normal(size=(4, 5))
    pair = [Tensor(g.normal(size=(4, 5))), Tensor(g.normal(size=(4, 5)))]
    for name, fn in (("mul", tz.mul), ("add", tz.add), ("sub", tz.sub)):
        reports.append(grad_check(lambda a, b, fn=fn: _wsum(fn(a, b), w2), pair, name=name))
    denom = [Tensor(g.normal(size=(4, 5))),
             Tensor(np.sign(g.normal(size=(4, 5))) * g.uniform(0.3, 2.0, size=(4, 5)))]
    reports.append(grad_check(lambda a, b: _wsum(tz.div(a, b), w2), denom, name="div"))
    w3 = g.normal(size=(5,))
    reports.append(grad_check(lambda x: _wsum(tz.tensor_sum(x, axis=0), w3),
                              [Tensor(g.normal(size=(3, 5)))], name="sum"))
    reports.append(grad_check(lambda x: _wsum(tz.mean(x, axis=0), w3),
                              [Tensor(g.normal(size=(3, 5)))], name="mean"))
    return reports


def composed_path_check(seed: int, t: int = 2, hw: int = 32, k: int = 4,
                        c: int = 32) -> GradReport:
    """Gradient check through stacked attention, grouped FFN and mask decode."""
    g = np.random.default_rng(seed)
    c0, alpha, alpha2 = 8, 4, 2
    c1, c2 = 12, 16
    h3, h2, h1 = hw // 16, hw // 8, hw // 4
    pyr = VisualPyramid(
        f4=Tensor(g.normal(size=(t, h1 * h1, c1))),
        f8=Tensor(g.normal(size=(t, h2 * h2, c2))),
        f16=Tensor(g.normal(size=(t, h3 * h3, 2 * c2))),
        frame_hw=(hw, hw))
    aligned = Tensor(g.normal(size=(t, h3 * h3, c)))
    kernels = tuple(Tensor(g.normal(size=(t, k, c0))) for _ in range(3))
    params = dec.init_mask_decoder(g, c=c, c1=c1, c2=c2, k=k, c0=c0,
                                   alpha=alpha, alpha2=alpha2)
    w = g.normal(size=(t, k, hw, hw))
    tensors = [tt for _, tt in named_tensors(params)] + list(kernels)

    def f(*ts):
        probs = dec.run_decoder(pyr, aligned, kernels, params)
        return _wsum(probs, w)

    return grad_check(f, tensors, name="stacked-attention->ffn->decode")


def run_suite(seeds: int = 10, verbose: bool = False) -> tuple[float, list]:
    """Run every check over ``seeds`` seeds; returns (worst error, reports)."""
    all_reports = []
    worst = 0.0
    for seed in range(seeds):
        for rep in op_checks(100 + seed):
            all_reports.append((seed, rep))
            worst = max(worst, rep.max_rel_error)
    for seed in range(seeds):
        rep = composed_path_check(1000 + seed)
        all_reports.append((seed, rep))
        worst = max(worst, rep.max_rel_error)
        if verbose:
            print(f"  composed path seed {seed}: {rep.max_rel_error:.3e}")
    return worst, all_reports
