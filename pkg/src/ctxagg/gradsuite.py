"""Gradient-check suite over the core ops and the three composite modules."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import functional as F
from .densefpn import DenseFPNBlock, DenseFPNConfig
from .gradcheck import grad_check
from .hroie import HRoIE, HRoIEConfig, extract, roi_align
from .pyramid import make_synthetic_pyramid
from .scp import CABlock
from .tensor import (Tensor, concat, getitem, log_softmax, matmul, mean, mul, relu, reshape,
                     sigmoid, softmax, tsum, transpose)

TOLERANCE = 1e-6


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _away_from(rng, shape, points, margin=0.05):
    """Random values kept at least ``margin`` from every kink in ``points``."""
    v = rng.standard_normal(shape)
    for p in points:
        close = np.abs(v - p) < margin
        v[close] = p + np.where(v[close] >= p, margin, -margin) * 2
    return Tensor(v, requires_grad=True)


def _check(build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list]], seed: int) -> float:
    rng = np.random.default_rng(seed)
    fn, params = build(rng)
    return grad_check(fn, params, eps=1e-5)


def _unary(op, shape=(3, 4)):
    def build(rng):
        x = _t(rng, *shape)
        r = Tensor(rng.standard_normal(op(x).shape))
        return (lambda: tsum(mul(op(x), r))), [x]
    return build


def _binary(op, sa, sb):
    def build(rng):
        a, b = _t(rng, *sa), _t(rng, *sb)
        r = Tensor(rng.standard_normal(op(a, b).shape))
        return (lambda: tsum(mul(op(a, b), r))), [a, b]
    return build


def _relu(rng):
    x = _away_from(rng, (4, 5), [0.0])
    r = Tensor(rng.standard_normal((4, 5)))
    return (lambda: tsum(mul(relu(x), r))), [x]


def _conv(k, stride, pad, bias=True):
    def build(rng):
        x = _t(rng, 2, 3, 6, 5)
        w = _t(rng, 4, 3, k, k)
        b = _t(rng, 4) if bias else None
        out = F.conv2d(x, w, b, stride, pad)
        r = Tensor(rng.standard_normal(out.shape))
        params = [x, w] + ([b] if bias else [])
        return (lambda: tsum(mul(F.conv2d(x, w, b, stride, pad), r))), params
    return build


def _maxpool(rng):
    # distinct values spaced well apart keep every argmax stable under eps
    x = Tensor(rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1, requires_grad=True)
    r = Tensor(rng.standard_normal((2, 2, 3, 3)))
    return (lambda: tsum(mul(F.maxpool2d(x, 2), r))), [x]


def _linear(rng):
    x, w, b = _t(rng, 5, 4), _t(rng, 3, 4), _t(rng, 3)
    r = Tensor(rng.standard_normal((5, 3)))
    return (lambda: tsum(mul(F.linear(x, w, b), r))), [x, w, b]


def _cross_entropy(rng):
    x = _t(rng, 6, 4)
    y = rng.integers(0, 4, size=6)
    return (lambda: F.cross_entropy(x, y)), [x]


def _smooth_l1(rng):
    target = rng.standard_normal((5, 4))
    d = _away_from(rng, (5, 4), [-1.0, 1.0])
    pred = Tensor(d.data + target, requires_grad=True)
    return (lambda: F.smooth_l1(pred, target)), [pred]


def _bce(rng):
    x = _t(rng, 3, 4, 4, scale=2.0)
    y = (rng.random((3, 4, 4)) > 0.5).astype(float)
    return (lambda: F.bce_with_logits(x, y)), [x]


def _roi_align(rng):
    feat = _t(rng, 2, 3, 9, 8)
    rois = np.array([[0, 1.3, 2.2, 20.1, 25.7], [1, 10.0, 4.5, 30.9, 33.2], [0, -3.0, 30.0, 12.0, 40.0]])
    r = Tensor(rng.standard_normal((3, 3, 3, 3)))
    return (lambda: tsum(mul(roi_align(feat, rois, 3, 0.25, 2), r))), [feat]


def _resize_down(rng):
    x = Tensor(rng.permutation(2 * 8 * 8).reshape(1, 2, 8, 8) * 0.1, requires_grad=True)
    r = Tensor(rng.standard_normal((1, 2, 2, 2)))
    return (lambda: tsum(mul(F.resize_to(x, 2, 2), r))), [x]


def _randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


def _densefpn_block(rng):
    cfg = DenseFPNConfig(depth=1, channels=3, mid_channels=2, levels=(2, 4))
    block = DenseFPNBlock(cfg, rng)
    _randomize(block, rng)
    pyr = make_synthetic_pyramid(int(rng.integers(1 << 30)), 1, 3, 32, 32, 2, 4)
    for t in pyr.levels.values():
        t.requires_grad = True
    rs = {i: Tensor(rng.standard_normal(t.shape)) for i, t in pyr.items()}

    def fn():
        out = block(pyr)
        total = None
        for i, t in out.items():
            term = tsum(mul(t, rs[i]))
            total = term if total is None else total + term
        return total

    return fn, block.parameters() + list(pyr.levels.values())


def _cablock(reduction):
    def build(rng):
        block = CABlock(4, reduction, rng)
        _randomize(block, rng)
        x = _t(rng, 2, 4, 3, 4)
        r = Tensor(rng.standard_normal(x.shape))
        return (lambda: tsum(mul(block(x), r))), block.parameters() + [x]
    return build


def _roi_fuse(task):
    def build(rng):
        cfg = HRoIEConfig(channels=2, levels=(2, 3), det_size=2, mask_size=3)
        model = HRoIE(cfg, rng)
        _randomize(model, rng)
        pyr = make_synthetic_pyramid(int(rng.integers(1 << 30)), 2, 2, 32, 32, 2, 3)
        for t in pyr.levels.values():
            t.requires_grad = True
        rois = np.array([[0, 2.5, 3.0, 20.0, 17.5], [1, 8.0, 1.0, 30.0, 29.0]])
        size = cfg.det_size if task == "detection" else cfg.mask_size
        r = Tensor(rng.standard_normal((2, 2, size, size)))
        params = list(model.cells(task).values())
        flat = [p for cell in params for p in cell.parameters()]
        return (lambda: tsum(mul(extract(pyr, rois, task, model), r))), flat + list(pyr.levels.values())
    return build


CASES: dict[str, Callable] = {
    "add": _binary(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _binary(lambda a, b: a - b, (3, 1), (1, 4)),
    "mul": _binary(lambda a, b: a * b, (2, 3, 4), (3, 1)),
    "relu": _relu,
    "sigmoid": _unary(sigmoid),
    "sum": _unary(lambda x: tsum(x, axis=1)),
    "mean": _unary(lambda x: mean(x, axis=0, keepdims=True)),
    "reshape": _unary(lambda x: reshape(x, (2, 6))),
    "transpose": _unary(lambda x: transpose(x, (1, 0))),
    "getitem": _unary(lambda x: getitem(x, (slice(None), [0, 2, 2]))),
    "matmul": _binary(matmul, (2, 3, 4), (2, 4, 5)),
    "concat": _binary(lambda a, b: concat([a, b], axis=1), (2, 3), (2, 2)),
    "softmax": _unary(lambda x: softmax(x, axis=1)),
    "log_softmax": _unary(lambda x: log_softmax(x, axis=0)),
    "conv2d_3x3": _conv(3, 1, 1),
    "conv2d_3x3_s2": _conv(3, 2, 1),
    "conv2d_1x1": _conv(1, 1, 0, bias=False),
    "conv2d_1x1_s2": _conv(1, 2, 0),
    "maxpool2d": _maxpool,
    "bilinear_up": _unary(lambda x: F.bilinear_resize(x, 5, 7), (1, 2, 3, 4)),
    "bilinear_down": _unary(lambda x: F.bilinear_resize(x, 3, 2), (1, 2, 5, 6)),
    "resize_to_up": _unary(lambda x: F.resize_to(x, 6, 8), (1, 2, 3, 4)),
    "resize_to_down": _resize_down,
    "linear": _linear,
    "cross_entropy": _cross_entropy,
    "smooth_l1": _smooth_l1,
    "bce_with_logits": _bce,
    "roi_align": _roi_align,
    "densefpn_block": _densefpn_block,
    "cablock_r1": _cablock(1),
    "cablock_r2": _cablock(2),
    "roi_fuse_detection": _roi_fuse("detection"),
    "roi_fuse_mask": _roi_fuse("mask"),
}


def run_suite(seed: int = 0, names=None) -> dict[str, float]:
    """Max relative error of every case; each case gets its own derived seed."""
    names = list(CASES) if names is None else list(names)
    return {name: _check(CASES[name], seed * 1000 + k) for k, name in enumerate(CASES) if name in names}
