import itertools

import numpy as np
import pytest

from ctxagg.config import resolve
from ctxagg.hroie import HRoIE, SingleLevelExtractor
from ctxagg.tensor import Tensor, softmax
from ctxagg.toy.detector import ToyDetector, forward_detector
from ctxagg.toy.train import train

SMALL = {
    "model.image_size": 64,
    "model.backbone_channels": [8, 8, 12, 12],
    "model.head_hidden": 16,
    "densefpn.channels": 8,
    "densefpn.mid_channels": 4,
    "train.batch_size": 1,
}

PROPS = np.array([[0, 2.0, 3.0, 30.0, 40.0], [0, 10.0, 10.0, 20.0, 20.0], [0, 0.0, 0.0, 64.0, 64.0],
                  [0, 40.0, 5.0, 60.0, 25.0], [0, 5.0, 44.0, 21.0, 60.0], [0, 30.0, 30.0, 50.0, 50.0],
                  [0, 1.0, 1.0, 9.0, 9.0]])


def small(**extra):
    return resolve({**SMALL, **extra})


def test_output_shapes_for_seven_proposals(rng):
    model = ToyDetector(small())
    out = model(rng.random((1, 3, 64, 64)), PROPS)
    assert out["cls_logits"].shape == (7, 4)
    assert out["box_deltas"].shape == (7, 4)
    assert out["mask_logits"].shape == (7, 14, 14)


def test_forward_is_deterministic(rng):
    img = rng.random((1, 3, 64, 64))
    a = ToyDetector(small())(img, PROPS)
    b = ToyDetector(small())(img, PROPS)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)


def test_zero_image_with_zero_heads_gives_uniform_posterior():
    model = ToyDetector(small())
    for p in model.box_head.cls.parameters():
        p.data[...] = 0
    probs = softmax(model(np.zeros((1, 3, 64, 64)), PROPS)["cls_logits"], axis=1).data
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


def test_closed_mask_gates_give_mask_head_of_zero(rng):
    model = ToyDetector(small())
    for cell in model.extractor.mask.values():
        cell.weight.data[...] = 0
        cell.bias.data[...] = -800.0
    out = model(rng.random((1, 3, 64, 64)), PROPS)["mask_logits"].data
    ref = model.mask_head(Tensor(np.zeros((1, 8, 14, 14)))).data[0]
    for k in range(7):
        np.testing.assert_array_equal(out[k], ref)


def test_module_toggles_change_structure():
    assert isinstance(ToyDetector(small()).extractor, HRoIE)
    bare = ToyDetector(small(**{"densefpn.enabled": False, "scp.enabled": False, "hroie.enabled": False}))
    assert bare.densefpn is None and bare.scp is None and isinstance(bare.extractor, SingleLevelExtractor)


@pytest.mark.parametrize("flags", list(itertools.product([False, True], repeat=3)),
                         ids=lambda f: "".join("DSH"[i] if v else "-" for i, v in enumerate(f)))
def test_ablation_matrix_trains_finitely(flags):
    d, s, h = flags
    cfg = small(**{"densefpn.enabled": d, "scp.enabled": s, "hroie.enabled": h, "train.iterations": 50,
                   "train.lr": 0.002})
    result = train(cfg)
    totals = result.totals()
    assert len(totals) == 50 and np.isfinite(totals).all()
    assert np.isfinite(np.concatenate([p.data.ravel() for p in result.model.parameters()])).all()


def test_float32_precision_runs(rng):
    model = ToyDetector(small(precision="float32"))
    out = forward_detector(model, rng.random((1, 3, 64, 64)), PROPS)
    assert out["cls_logits"].dtype == np.float32
