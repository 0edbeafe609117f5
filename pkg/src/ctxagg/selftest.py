"""Fast worked-example checks over every module, run by ``ctxagg selftest``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import oracles as O
from .accounting import count_macs, count_params, registry_total
from .densefpn import (DenseFPN, DenseFPNBlock, DenseFPNConfig, block_params, bottomup_aggregate,
                       normalize_weights, topdown_aggregate)
from .gradcheck import grad_check
from .hroie import HRoIE, HRoIEConfig, extract, fuse, roi_align
from .nn import Conv2d, Module
from .optim import SGD
from .pyramid import LateralReducer, make_synthetic_pyramid
from .scp import SCP, CABlock, SCPConfig, cablock_forward
from .tensor import Tensor, concat_channels, mul, relu, sigmoid, softmax, tsum
from .toy.boxes import soft_nms
from .toy.scenes import generate_scene

CHECKS: list[tuple[str, Callable[[], None]]] = []


def check(name: str):
    def register(fn):
        CHECKS.append((name, fn))
        return fn
    return register


@dataclass
class Outcome:
    name: str
    ok: bool
    detail: str = ""


def _close(a, b, tol=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AssertionError(f"shape {a.shape} != {b.shape}")
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    if err > tol:
        raise AssertionError(f"max abs error {err:.3e} > {tol:.0e}")


def _zero(module: Module):
    for p in module.parameters():
        p.data[...] = 0.0


# -- core ops -----------------------------------------------------------------
@check("conv2d.pointwise_scale")
def _():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    _close(out.data, np.full((1, 1, 3, 3), 2.0), 0)


@check("conv2d.full_window_sum")
def _():
    out = F.conv2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]])), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 0, 0] == 10.0


@check("conv2d.naive_oracle")
def _():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    _close(F.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data, O.conv2d(x, w, None, 2, 1))


@check("maxpool2d.examples")
def _():
    _close(F.maxpool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]])), 2).data, [[[[4.0]]]], 0)
    _close(F.maxpool2d(Tensor(np.full((1, 2, 4, 6), 1.5)), 2).data, np.full((1, 2, 2, 3), 1.5), 0)
    x = np.random.default_rng(1).standard_normal((1, 1, 6, 6))
    _close(F.maxpool2d(Tensor(x), 2).data, O.maxpool2d(x, 2))


@check("bilinear_resize.examples")
def _():
    x = np.random.default_rng(2).standard_normal((1, 2, 5, 3))
    assert np.array_equal(F.bilinear_resize(Tensor(x), 5, 3).data, x)
    _close(F.bilinear_resize(Tensor(np.full((1, 1, 3, 2), 7.0)), 5, 9).data, np.full((1, 1, 5, 9), 7.0))
    small = np.array([[[[0.0, 1], [2, 3]]]])
    _close(F.bilinear_resize(Tensor(small), 4, 4).data, O.bilinear_resize(small, 4, 4))


@check("softmax.examples")
def _():
    _close(softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)
    _close(softmax(Tensor(np.array([math.log(2), 0.0]))).data, [2 / 3, 1 / 3])
    _close(softmax(Tensor(np.array([1.0, 2, 3]))).data, [0.09003057, 0.24472847, 0.66524096], 1e-8)


@check("elementwise.examples")
def _():
    assert float(sigmoid(Tensor(np.array(0.0))).data) == 0.5
    _close(relu(Tensor(np.array([-3.0, 3.0]))).data, [0.0, 3.0], 0)
    a, b = np.zeros((1, 2, 2, 2)), np.ones((1, 3, 2, 2))
    out = concat_channels([Tensor(a), Tensor(b)]).data
    assert out.shape == (1, 5, 2, 2) and not out[:, :2].any() and out[:, 2:].all()


@check("grad_check.examples")
def _():
    x = Tensor(np.array([1.0, 2, 3]))
    assert grad_check(lambda: tsum(mul(x, x)), [x]) < 1e-9
    rng = np.random.default_rng(3)
    xi, w = Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((2, 2, 3, 3)))
    assert grad_check(lambda: tsum(relu(F.conv2d(xi, w, padding=1))), [xi, w]) < 1e-6
    blk = CABlock(8, 1, rng)
    for p in blk.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    p = Tensor(rng.standard_normal((1, 8, 3, 3)))
    assert grad_check(lambda: tsum(blk(p)), blk.parameters() + [p]) < 1e-6


@check("sgd.examples")
def _():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([5.0])
    SGD([p], lr=0.0).step()
    assert p.data[0] == 1.0
    p.grad = np.array([2.0])
    SGD([p], lr=0.1).step()
    _close(p.data, [0.8])
    q = Tensor(np.array([0.0]), requires_grad=True)
    opt = SGD([q], lr=0.1, momentum=0.9)
    seen = []
    for _ in range(2):
        q.grad = np.array([1.0])
        opt.step()
        seen.append(q.data[0])
    _close(seen, [-0.1, -0.29])


# -- pyramid ------------------------------------------------------------------
@check("pyramid.examples")
def _():
    from .accounting import level_sizes
    assert [s[0] for s in level_sizes((512, 512), range(2, 7)).values()] == [128, 64, 32, 16, 8]
    a = make_synthetic_pyramid(0, 1, 256, 64, 64, 2, 6)
    b = make_synthetic_pyramid(0, 1, 256, 64, 64, 2, 6)
    assert all(np.array_equal(a[i].data, b[i].data) for i in a)
    assert [a[i].shape[2] for i in a] == [16, 8, 4, 2, 1]
    assert abs(float(a[2].data.mean())) < 0.1
    red = LateralReducer({2: 4, 3: 4, 4: 4, 5: 4}, 3, 6)
    feats = {i: Tensor(np.zeros((1, 4, 64 >> i, 64 >> i))) for i in range(2, 6)}
    assert all(not t.data.any() for t in red(feats).levels.values())


# -- densefpn -----------------------------------------------------------------
@check("densefpn.weights")
def _():
    _close(normalize_weights(Tensor(np.zeros(3))).data, [1 / 3] * 3)
    _close(normalize_weights(Tensor(np.array([math.log(2), 0.0]))).data, [2 / 3, 1 / 3])


@check("densefpn.zero_transform")
def _():
    cfg = DenseFPNConfig(depth=2, channels=3, mid_channels=2, levels=(2, 4))
    net = DenseFPN(cfg)
    _zero(net)
    out = net(make_synthetic_pyramid(1, 1, 3, 32, 32, 2, 4))
    assert all(not t.data.any() for t in out.levels.values())


@check("densefpn.composition")
def _():
    cfg = DenseFPNConfig(depth=2, channels=3, mid_channels=2, levels=(2, 4))
    net = DenseFPN(cfg, np.random.default_rng(4))
    pyr = make_synthetic_pyramid(2, 1, 3, 32, 32, 2, 4)
    once = bottomup_aggregate(pyr, topdown_aggregate(pyr, net.blocks[0]), net.blocks[0])
    _close(once[3].data, net.blocks[0](pyr)[3].data, 0)
    chained = net.blocks[1](net.blocks[0](pyr))
    full = net(pyr)
    assert full.shapes() == pyr.shapes()
    for i in full:
        _close(full[i].data, chained[i].data, 0)
    assert block_params(cfg) == count_params(DenseFPNBlock(cfg)).params


# -- scp ----------------------------------------------------------------------
@check("scp.residual_identity")
def _():
    blk = CABlock(4, 1, np.random.default_rng(5))
    p = Tensor(np.random.default_rng(6).standard_normal((1, 4, 3, 3)))
    _close(blk(p).data, p.data, 0)


@check("scp.uniform_maps")
def _():
    blk = CABlock(4, 1, np.random.default_rng(7))
    p = Tensor(np.broadcast_to(np.arange(4.0)[None, :, None, None], (1, 4, 3, 2)).copy())
    _close(blk.attention_map(p).data, np.full((1, 1, 6), 1 / 6))
    _close(blk.gate_map(p).data, np.full((1, 1, 3, 2), 1 / 6))


@check("scp.composed_oracle")
def _():
    rng = np.random.default_rng(8)
    blk = CABlock(8, 1, rng)
    for p in blk.parameters():
        p.data[...] = rng.standard_normal(p.shape)
    x = rng.standard_normal((1, 8, 2, 3))

    def m(c):
        return c.weight.data[:, :, 0, 0]

    ref = O.cablock(x, m(blk.key), blk.key.bias.data, m(blk.value), blk.value.bias.data, m(blk.gate),
                    blk.gate.bias.data, [("linear", m(blk.refine[0]), blk.refine[0].bias.data)])
    _close(cablock_forward(Tensor(x), blk).data, ref)


@check("scp.accounting")
def _():
    model = SCP(SCPConfig(channels=256))
    rep = count_params(model)
    assert rep.weights + rep.biases == 660_490 and rep.weights == 657_920
    pyr = make_synthetic_pyramid(0, 1, 2, 32, 32, 2, 3)
    assert SCP(SCPConfig(2, (), 1))(pyr).levels == pyr.levels


# -- hroie --------------------------------------------------------------------
@check("roi_align.examples")
def _():
    feat = Tensor(np.full((1, 2, 8, 8), 5.0))
    _close(roi_align(feat, np.array([[0, 0.7, 1.3, 6.2, 5.9]]), 3, 1.0).data, np.full((1, 2, 3, 3), 5.0))
    x = np.random.default_rng(9).standard_normal((1, 2, 8, 8))
    # box (1,2)-(5,6) with 2×2 bins and 2 samples per bin hits cell centres
    got = roi_align(Tensor(x), np.array([[0, 1.0, 2.0, 5.0, 6.0]]), 2, 1.0).data
    pooled = x[:, :, 2:6, 1:5].reshape(1, 2, 2, 2, 2, 2).mean(axis=(3, 5))
    _close(got, pooled)
    rois = np.array([[0, 1.5, 2.0, 6.5, 7.0]])
    _close(roi_align(Tensor(x), rois, 2, 1.0).data, O.roi_align(x, rois, 2, 1.0))


@check("hroie.saturation")
def _():
    rng = np.random.default_rng(10)
    crops = {i: Tensor(rng.standard_normal((2, 3, 2, 2))) for i in (2, 3)}
    cells = {str(i): Conv2d(6, 3, 1, init="zeros") for i in (2, 3)}
    for c in cells.values():
        c.bias.data[...] = -30.0
    assert np.abs(fuse(crops, cells, "bottom_up").data).max() < 1e-12
    for c in cells.values():
        c.bias.data[...] = 30.0
    _close(fuse(crops, cells, "bottom_up").data, crops[2].data + crops[3].data, 1e-12)
    one = {2: crops[2]}
    _close(fuse(one, {"2": Conv2d(6, 3, 1, init="zeros")}, "top_down").data, 0.5 * crops[2].data, 0)


@check("hroie.scalar_recurrence")
def _():
    r = {2: 0.7, 3: -1.2}
    w = {2: (0.4, -0.9, 0.1), 3: (1.3, 0.5, -0.2)}  # (w_f, w_r, bias)
    cells = {}
    for i, (wf, wr, b) in w.items():
        c = Conv2d(2, 1, 1, init="zeros")
        c.weight.data[0, :, 0, 0] = [wf, wr]
        c.bias.data[0] = b
        cells[str(i)] = c
    f = 0.0
    for i in (2, 3):
        wf, wr, b = w[i]
        f = f + r[i] / (1 + math.exp(-(wf * f + wr * r[i] + b)))
    got = fuse({i: Tensor(np.full((1, 1, 1, 1), v)) for i, v in r.items()}, cells, "bottom_up")
    _close(got.data.ravel(), [f])


@check("hroie.order_and_zero")
def _():
    model = HRoIE(HRoIEConfig(channels=2, levels=(2, 3, 4)))
    pyr = make_synthetic_pyramid(0, 1, 2, 32, 32, 2, 4)
    for t in pyr.levels.values():
        t.data[...] = 0.0
    rois = np.array([[0, 1.0, 1.0, 20.0, 20.0]])
    for task, order in (("detection", [2, 3, 4]), ("mask", [4, 3, 2])):
        trace = []
        out = extract(pyr, rois, task, model, trace)
        assert trace == order and not out.data.any()


@check("hroie.accounting")
def _():
    model = HRoIE(HRoIEConfig(channels=256))
    rep = count_params(model)
    assert (rep.weights, rep.biases) == (1_048_576, 2_048) and registry_total(model) == rep.params


# -- accounting ---------------------------------------------------------------
@check("accounting.examples")
def _():
    conv = Conv2d(256, 256, 1)
    assert count_params(conv).params == 65_792
    assert count_params(CABlock(256, 1)).weights == 2 * 256 * 256 + 2 * 256 == 131_584
    assert count_macs(conv, (128, 128)).macs == 268_435_456 * 4
    assert count_macs(Conv2d(256, 256, 1), (64, 64)).macs == 268_435_456
    assert count_macs(Module(), (64, 64)).macs == 0


# -- toy pipeline -------------------------------------------------------------
@check("scenes.determinism_and_bounds")
def _():
    assert np.array_equal(generate_scene(3).image, generate_scene(3).image)
    for seed in range(200):
        s = generate_scene(seed)
        b = s.boxes
        assert len(b) >= 1 and np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])
        assert b.min() >= 0 and b.max() <= 128


@check("soft_nms.examples")
def _():
    boxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30], [40, 0, 50, 10]], float)
    b, s, idx = soft_nms(boxes, np.array([0.3, 0.9, 0.6]))
    assert idx.tolist() == [1, 2, 0] and s.tolist() == [0.9, 0.6, 0.3]
    _, s, idx = soft_nms(np.array([[0, 0, 10, 10], [0, 0, 10, 10]], float), np.array([0.9, 0.8]))
    assert idx.tolist() == [0]
    # overlap 4/10 = 0.4
    pair = np.array([[0, 0, 10, 10], [0, 0, 10, 4]], float)
    _, s, idx = soft_nms(pair, np.array([0.9, 0.8]))
    assert idx.tolist() == [0, 1] and s.tolist() == [0.9, 0.8]


def run(names=None) -> list[Outcome]:
    out = []
    for name, fn in CHECKS:
        if names is not None and name not in names:
            continue
        try:
            fn()
            out.append(Outcome(name, True))
        except Exception as exc:  # report every failure, keep going
            out.append(Outcome(name, False, f"{type(exc).__name__}: {exc}"))
    return out
