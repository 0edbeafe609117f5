import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxagg import oracles as O
from ctxagg.densefpn import (DenseFPN, DenseFPNBlock, DenseFPNConfig, block_params, bottomup_aggregate,
                             normalize_weights, topdown_aggregate, transform_params)
from ctxagg.accounting import count_params
from ctxagg.pyramid import FeaturePyramid, make_synthetic_pyramid
from ctxagg.tensor import Tensor


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


# -- numpy oracle built from the loop primitives ------------------------------
def np_softmax(v):
    return np.array(O.softmax(list(v)))


def np_resize(x, h, w):
    if (h, w) == x.shape[2:]:
        return x
    if h > x.shape[2]:
        return O.bilinear_resize(x, h, w)
    return O.maxpool2d(x, x.shape[2] // h)


def np_transform(t, x):
    y = O.conv2d(np.maximum(x, 0), t.reduce.weight.data, t.reduce.bias.data)
    y = O.conv2d(y, t.conv.weight.data, t.conv.bias.data, 1, 1)
    return O.conv2d(y, t.expand.weight.data, t.expand.bias.data)


def np_block(block, x):
    lv = block.levels
    lo, hi = lv[0], lv[-1]
    down = {}
    for i in lv:
        fused = x[i].copy()
        if i < hi:
            w = np_softmax(block.v_down[str(i)].data)
            for k, j in enumerate(range(i + 1, hi + 1)):
                fused = fused + np_resize(x[j], *x[i].shape[2:]) * w[k]
        down[i] = np_transform(block.down[str(i)], fused)
    up = {}
    for i in lv:
        fused = x[i] + down[i]
        if i > lo:
            w = np_softmax(block.v_up[str(i)].data)
            for k, j in enumerate(range(lo, i)):
                fused = fused + np_resize(down[j], *x[i].shape[2:]) * w[k]
        up[i] = np_transform(block.up[str(i)], fused)
    return up


def test_reweight_examples():
    np.testing.assert_allclose(normalize_weights(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(normalize_weights(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(normalize_weights(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524],
                               atol=1e-5)


def test_topdown_top_level_is_transform_only(rng):
    cfg = DenseFPNConfig(1, 2, 2, (2, 4))
    block = DenseFPNBlock(cfg, rng)
    randomize(block, rng)
    pyr = make_synthetic_pyramid(0, 1, 2, 32, 32, 2, 4)
    down = topdown_aggregate(pyr, block)
    np.testing.assert_allclose(down[4].data, np_transform(block.down["4"], pyr[4].data), atol=1e-12)


def test_topdown_with_zero_upper_levels(rng):
    cfg = DenseFPNConfig(1, 2, 2, (2, 4))
    block = DenseFPNBlock(cfg, rng)
    randomize(block, rng)
    pyr = make_synthetic_pyramid(0, 1, 2, 32, 32, 2, 4)
    for i in (3, 4):
        pyr[i].data[...] = 0
    down = topdown_aggregate(pyr, block)
    np.testing.assert_allclose(down[2].data, np_transform(block.down["2"], pyr[2].data), atol=1e-12)


def test_zero_transforms_give_zero_output(rng):
    net = DenseFPN(DenseFPNConfig(2, 3, 2, (2, 4)), rng)
    for p in net.parameters():
        p.data[...] = 0
    out = net(make_synthetic_pyramid(3, 1, 3, 32, 32, 2, 4))
    assert all(not t.data.any() for t in out.levels.values())


def test_zero_input_zero_bias_gives_zero(rng):
    net = DenseFPN(DenseFPNConfig(1, 3, 2, (2, 4)), rng)
    pyr = make_synthetic_pyramid(0, 1, 3, 32, 32, 2, 4)
    for t in pyr.levels.values():
        t.data[...] = 0
    assert all(not t.data.any() for t in net(pyr).levels.values())


def test_two_level_scalar_evaluation():
    # 1x1 maps, one channel: every conv is a scalar affine map
    cfg = DenseFPNConfig(1, 1, 1, (2, 3))
    block = DenseFPNBlock(cfg, np.random.default_rng(0))
    vals = iter([0.7, -0.3, 1.1, 0.2, -0.9, 0.4, 0.5, 0.1, -1.3, 0.6, 0.8, -0.2, 0.3, 0.9, -0.4, 1.2,
                 0.05, -0.6, 0.35, 0.75, -0.15, 0.45, 1.5, -0.8, 0.25, 0.65, -0.55, 0.85, 0.15, -0.35])
    for p in block.parameters():
        p.data[...] = next(vals)
    x2, x3 = 0.8, -1.7

    def T(t, v):
        r = max(v, 0.0) * t.reduce.weight.data.item() + t.reduce.bias.data.item()
        c = r * t.conv.weight.data[0, 0, 1, 1] + t.conv.bias.data.item()
        return c * t.expand.weight.data.item() + t.expand.bias.data.item()

    d2 = T(block.down["2"], x2 + x3)  # a single source gets weight 1
    d3 = T(block.down["3"], x3)
    u2 = T(block.up["2"], x2 + d2)
    u3 = T(block.up["3"], x3 + d3 + d2)
    pyr = FeaturePyramid({2: Tensor(np.full((1, 1, 1, 1), x2)), 3: Tensor(np.full((1, 1, 1, 1), x3))})
    out = block(pyr)
    np.testing.assert_allclose([out[2].data.item(), out[3].data.item()], [u2, u3], atol=1e-12, rtol=0)


def test_three_level_bottomup_scalar_evaluation(rng):
    cfg = DenseFPNConfig(1, 1, 1, (2, 4))
    block = DenseFPNBlock(cfg, rng)
    randomize(block, rng, 1.0)
    x = {i: rng.standard_normal() for i in (2, 3, 4)}
    pyr = FeaturePyramid({i: Tensor(np.full((1, 1, 1, 1), v)) for i, v in x.items()})
    down = {i: t.data.item() for i, t in topdown_aggregate(pyr, block).items()}

    def T(t, v):
        r = max(v, 0.0) * t.reduce.weight.data.item() + t.reduce.bias.data.item()
        c = r * t.conv.weight.data[0, 0, 1, 1] + t.conv.bias.data.item()
        return c * t.expand.weight.data.item() + t.expand.bias.data.item()

    w3 = O.softmax(list(block.v_up["3"].data))
    w4 = O.softmax(list(block.v_up["4"].data))
    want = {
        2: T(block.up["2"], x[2] + down[2]),
        3: T(block.up["3"], x[3] + down[3] + w3[0] * down[2]),
        4: T(block.up["4"], x[4] + down[4] + w4[0] * down[2] + w4[1] * down[3]),
    }
    out = bottomup_aggregate(pyr, {i: Tensor(np.full((1, 1, 1, 1), v)) for i, v in down.items()}, block)
    for i in (2, 3, 4):
        assert abs(out[i].data.item() - want[i]) < 1e-12


def test_single_level_degenerates(rng):
    block = DenseFPNBlock(DenseFPNConfig(1, 2, 2, (3, 3)), rng)
    randomize(block, rng)
    pyr = make_synthetic_pyramid(1, 1, 2, 32, 32, 3, 3)
    d = np_transform(block.down["3"], pyr[3].data)
    np.testing.assert_allclose(block(pyr)[3].data, np_transform(block.up["3"], pyr[3].data + d), atol=1e-12)


def test_block_matches_numpy_oracle(rng):
    block = DenseFPNBlock(DenseFPNConfig(1, 2, 2, (2, 5)), rng)
    randomize(block, rng)
    pyr = make_synthetic_pyramid(5, 1, 2, 64, 64, 2, 5)
    out = block(pyr)
    ref = np_block(block, {i: t.data for i, t in pyr.items()})
    for i in out:
        np.testing.assert_allclose(out[i].data, ref[i], atol=1e-12, rtol=0)


def test_depth_two_equals_chained_blocks(rng):
    net = DenseFPN(DenseFPNConfig(2, 2, 2, (2, 4)), rng)
    randomize(net, rng)
    pyr = make_synthetic_pyramid(2, 1, 2, 32, 32, 2, 4)
    chained = net.blocks[1](net.blocks[0](pyr))
    composed = bottomup_aggregate(pyr, topdown_aggregate(pyr, net.blocks[0]), net.blocks[0])
    np.testing.assert_array_equal(composed[2].data, net.blocks[0](pyr)[2].data)
    out = net(pyr)
    for i in out:
        np.testing.assert_array_equal(out[i].data, chained[i].data)


@given(depth=st.integers(0, 3), seed=st.integers(0, 2**31))
def test_shapes_preserved_for_any_depth(depth, seed):
    net = DenseFPN(DenseFPNConfig(depth, 2, 2, (2, 4)), np.random.default_rng(seed))
    pyr = make_synthetic_pyramid(seed, 1, 2, 32, 32, 2, 4)
    assert net(pyr).shapes() == pyr.shapes()


def test_level_and_channel_mismatch_raise(rng):
    net = DenseFPN(DenseFPNConfig(1, 2, 2, (2, 4)), rng)
    with pytest.raises(ValueError):
        net(make_synthetic_pyramid(0, 1, 2, 64, 64, 2, 5))
    with pytest.raises(ValueError):
        net(make_synthetic_pyramid(0, 1, 3, 32, 32, 2, 4))


def test_param_count_closed_form_and_linear_growth():
    counts = [count_params(DenseFPN(DenseFPNConfig(d, 8, 4, (2, 6)))).params for d in range(5)]
    deltas = np.diff(counts)
    assert counts[0] == 0 and np.all(deltas == deltas[0])
    assert deltas[0] == block_params(DenseFPNConfig(1, 8, 4, (2, 6)))
    # 5 levels: 2·5 transforms plus 5·4 re-weighting scalars
    assert block_params(DenseFPNConfig(1, 256, 192)) == 10 * transform_params(256, 192) + 20
    assert transform_params(256, 192) == 256 * 192 * 2 + 9 * 192 * 192 + 192 * 2 + 256
