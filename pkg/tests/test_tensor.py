import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxagg.tensor import (Tensor, add, concat, concat_channels, getitem, log_softmax, matmul, mean, mul,
                           no_grad, relu, reshape, sigmoid, softmax, topological_order, transpose, tsum)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data,
                               [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([1000.0, 1001.0, 1002.0])
    np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x - 1000)).data, atol=1e-15)
    np.testing.assert_allclose(np.exp(log_softmax(Tensor(x)).data), softmax(Tensor(x)).data, atol=1e-15)


def test_elementwise_examples():
    assert sigmoid(Tensor(0.0)).data == 0.5
    np.testing.assert_array_equal(relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
    s = sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([-1.0, 0.0, 2.0])
    tsum(relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_concat_channels_keeps_order():
    a = np.zeros((1, 2, 2, 2))
    b = np.arange(12.0).reshape(1, 3, 2, 2)
    out = concat_channels([Tensor(a), Tensor(b)]).data
    assert out.shape == (1, 5, 2, 2)
    np.testing.assert_array_equal(out[:, 2:], b)


def test_incompatible_shapes_name_both():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0, 3.0])
    tsum(mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_shared_node_gradients_accumulate():
    # y = x*x + x*x uses x four times through a shared intermediate
    x = leaf([3.0])
    sq = mul(x, x)
    tsum(add(sq, sq)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_each_node_visited_once_in_diamond_graph():
    x = leaf(2.0)
    a = x * 3.0
    b = a * a
    c = a + b
    d = b * c
    order = topological_order(d)
    assert len(order) == len({id(n) for n in order})
    assert order.index(a) < order.index(b) < order.index(c) < order.index(d)
    d.backward()
    # d = 9x²(3x + 9x²) = 27x³ + 81x⁴, so d' = 81x² + 324x³
    np.testing.assert_allclose(x.grad, 81 * 4 + 324 * 8)


def test_deep_chain_does_not_recurse():
    x = leaf(1.0)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


def test_backward_requires_scalar_or_seed():
    x = leaf([1.0, 2.0])
    y = x * 2.0
    with pytest.raises(RuntimeError):
        y.backward()
    y.backward(np.array([1.0, 1.0]))
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_broadcast_gradients_are_reduced():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones((3,)))
    tsum(mul(a, b) + b).backward()
    # two rows of a, plus b broadcast over the same two rows
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])
    np.testing.assert_allclose(a.grad, np.ones((2, 3)))


def test_getitem_with_repeated_indices():
    x = leaf(np.arange(4.0))
    tsum(getitem(x, [0, 0, 3])).backward()
    np.testing.assert_allclose(x.grad, [2.0, 0.0, 0.0, 1.0])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_matmul_matches_numpy(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_sums_to_one(values):
    p = softmax(Tensor(np.array(values))).data
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)


def test_structural_ops_roundtrip():
    x = leaf(np.arange(6.0).reshape(2, 3))
    y = transpose(reshape(x, (3, 2)), (1, 0))
    assert y.shape == (2, 3)
    tsum(mean(concat([y, y], axis=0), axis=0)).backward()
    np.testing.assert_allclose(x.grad, np.full((2, 3), 0.5))
