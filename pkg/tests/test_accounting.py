import numpy as np
import pytest

from ctxagg.accounting import (CostReport, conv_macs, count_macs, count_params, densefpn_macs, hroie_macs,
                               reconcile, registry_total, scp_macs)
from ctxagg.densefpn import DenseFPN, DenseFPNConfig, block_params
from ctxagg.hroie import HRoIE, HRoIEConfig
from ctxagg.nn import Conv2d
from ctxagg.pyramid import LateralReducer, make_synthetic_pyramid
from ctxagg.scp import SCP, CABlock, SCPConfig
from ctxagg.tensor import Tensor, no_grad
from ctxagg.tracing import trace_macs


def test_conv_examples():
    assert conv_macs(256, 256, 1, 128, 128) == 256 * 256 * 128 * 128
    rep = count_macs(Conv2d(8, 4, 3, padding=1), (16, 16))
    assert rep.macs == 8 * 4 * 9 * 256 and rep.flops == 2 * rep.macs


def test_macs_scale_with_pixels():
    small = count_macs(Conv2d(4, 4, 1), (64, 64)).macs
    assert count_macs(Conv2d(4, 4, 1), (128, 128)).macs == 4 * small


@pytest.mark.parametrize("model", [
    DenseFPN(DenseFPNConfig(2, 16, 8, (2, 5))),
    SCP(SCPConfig(16, (2, 3, 4, 5), 2)),
    HRoIE(HRoIEConfig(16, (2, 3, 4, 5))),
    CABlock(8, 1),
    LateralReducer({2: 3, 3: 5}, 8, 5),
])
def test_registry_counts_agree(model):
    model.assign_names()
    rep = count_params(model)
    assert rep.params == registry_total(model) == rep.weights + rep.biases + rep.norm_affine + rep.reweight


def test_densefpn_breakdown_kinds():
    cfg = DenseFPNConfig(1, 256, 192)
    rep = count_params(DenseFPN(cfg).assign_names())
    assert rep.reweight == 20 and rep.params == block_params(cfg)


def test_traced_densefpn_conv_macs_match_analytical(rng):
    cfg = DenseFPNConfig(2, 6, 4, (2, 5))
    net = DenseFPN(cfg, rng)
    pyr = make_synthetic_pyramid(0, 1, 6, 64, 64, 2, 5)
    with no_grad(), trace_macs() as tr:
        net(pyr)
    assert tr.by_op["conv2d"] == densefpn_macs(cfg, (64, 64))["conv"]


@pytest.mark.parametrize("reduction", [1, 2])
def test_traced_scp_macs_match_analytical(rng, reduction):
    cfg = SCPConfig(8, (2, 3, 4), reduction)
    model = SCP(cfg, rng)
    pyr = make_synthetic_pyramid(1, 1, 8, 64, 64, 2, 4)
    with no_grad(), trace_macs() as tr:
        model(pyr)
    ana = scp_macs(cfg, (64, 64))
    assert tr.by_op["conv2d"] == ana["conv"] + ana["refine"]
    assert tr.by_op["matmul"] == ana["pooling"]


def test_traced_hroie_macs_match_analytical(rng):
    cfg = HRoIEConfig(4, (2, 3, 4), det_size=3, mask_size=5)
    model = HRoIE(cfg, rng)
    pyr = make_synthetic_pyramid(2, 2, 4, 64, 64, 2, 4)
    det = np.array([[0, 1.0, 2.0, 30.0, 40.0], [1, 5.0, 5.0, 20.0, 50.0], [0, 0.0, 0.0, 64.0, 64.0]])
    with no_grad(), trace_macs() as tr:
        model(pyr, det, "detection")
        model(pyr, det[:2], "mask")
    ana = hroie_macs(cfg, 3, 2)
    assert tr.by_op["conv2d"] == ana["gate"]
    assert tr.by_op["roi_align"] == ana["roi_align"]


def test_lateral_macs_traced(rng):
    red = LateralReducer({2: 3, 3: 5, 4: 7}, 8, 6, rng)
    feats = {i: Tensor(rng.standard_normal((1, c, 64 >> i, 64 >> i))) for i, c in ((2, 3), (3, 5), (4, 7))}
    with trace_macs() as tr:
        red(feats)
    assert tr.total == count_macs(red, (64, 64)).macs


def test_report_serialises():
    d = count_macs(HRoIE(HRoIEConfig(4, (2, 3))).assign_names(), (32, 32), 10, 5).to_dict()
    assert d["flops_2x"] == 2 * d["macs"] and d["input_hw"] == [32, 32]
    assert any("10 detection rois" in n for n in d["notes"])
    assert CostReport("x").flops is None


def test_reconcile_gating_rows_pass():
    rows = {r["item"]: r for r in reconcile()}
    assert rows["hroie.params"]["ours"] == 1_050_624
    assert rows["scp.params"]["ours"] == 660_490
    assert rows["densefpn.block_params@M=192"]["ours"] == 4_307_220
    assert all(r["pass"] for r in rows.values() if r["gating"])
    assert rows["scp.flops[macs]"]["ours"] == 1_452_933_120
    assert "hroie.flops@1000/100[macs]" in rows
