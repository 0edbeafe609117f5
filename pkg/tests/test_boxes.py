import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from ctxagg import oracles as O
from ctxagg.toy.boxes import box_iou, decode, encode, soft_nms


def test_iou_examples():
    a = np.array([[0, 0, 10, 10]])
    np.testing.assert_allclose(box_iou(a, [[0, 0, 10, 10], [5, 0, 15, 10], [20, 20, 30, 30]]), [[1, 1 / 3, 0]])


def test_disjoint_boxes_keep_scores_in_order():
    boxes = np.array([[0, 0, 5, 5], [10, 10, 15, 15], [20, 0, 25, 5]])
    b, s, idx = soft_nms(boxes, [0.3, 0.9, 0.6])
    np.testing.assert_array_equal(idx, [1, 2, 0])
    np.testing.assert_array_equal(s, [0.9, 0.6, 0.3])


def test_identical_duplicate_is_dropped():
    b, s, idx = soft_nms(np.array([[0, 0, 10, 10], [0, 0, 10, 10]]), [0.9, 0.8])
    np.testing.assert_array_equal(idx, [0])


def test_below_threshold_overlap_untouched():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 4]])  # IoU 0.4
    _, s, idx = soft_nms(boxes, [0.9, 0.8])
    np.testing.assert_array_equal(idx, [0, 1])
    np.testing.assert_array_equal(s, [0.9, 0.8])


def test_linear_decay_value():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 8]])  # IoU 0.8
    _, s, _ = soft_nms(boxes, [0.9, 0.5])
    np.testing.assert_allclose(s, [0.9, 0.5 * 0.2])


def test_gaussian_mode_decays_every_overlap():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 4]])
    _, s, _ = soft_nms(boxes, [0.9, 0.8], mode="gaussian", sigma=0.5)
    np.testing.assert_allclose(s, [0.9, 0.8 * np.exp(-0.16 / 0.5)])


@given(st.integers(0, 2**31), st.integers(1, 12))
def test_soft_nms_matches_loop_oracle(seed, n):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 30, (n, 2))
    wh = rng.uniform(2, 20, (n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    scores = rng.uniform(0, 1, n)
    _, s, idx = soft_nms(boxes, scores)
    ref = O.soft_nms(boxes.tolist(), scores.tolist())
    assert idx.tolist() == [i for i, _ in ref]
    np.testing.assert_allclose(s, [v for _, v in ref], atol=1e-12, rtol=0)


@given(st.integers(0, 2**31))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    p = np.concatenate([xy := rng.uniform(0, 50, (5, 2)), xy + rng.uniform(4, 30, (5, 2))], axis=1)
    g = np.concatenate([xy2 := rng.uniform(0, 50, (5, 2)), xy2 + rng.uniform(4, 30, (5, 2))], axis=1)
    np.testing.assert_allclose(decode(p, encode(p, g)), g, atol=1e-9)
    np.testing.assert_allclose(encode(p, p), 0, atol=1e-12)
