"""Parameter and multiply-accumulate accounting.

Parameter counts come from walking a live model's registry; closed-form
counts are kept alongside as a cross-check. MAC counts are analytical (the
modules are too large to run at 512×512 on a CPU) and are cross-checked
against traced counts at small sizes in the tests.

FLOPs are reported both as MACs and as 2×MACs because published tables do
not agree on a convention.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .densefpn import DenseFPN, DenseFPNConfig, block_params
from .hroie import HRoIE, HRoIEConfig, hroie_params
from .functional import conv_output_size
from .nn import Conv2d, Module
from .pyramid import LateralReducer
from .scp import SCP, CABlock, SCPConfig, cablock_params

# Reference ablation numbers (iSAID, Mask R-CNN R-50-FPN baseline, 512×512 FLOPs).
REFERENCE = {
    "baseline": {"params": 43.82e6, "flops": 114.96e9},
    "densefpn": {1: {"params": 44.19e6, "flops": 111.45e9}, 3: {"params": 48.47e6, "flops": 130.05e9},
                 5: {"params": 52.75e6, "flops": 148.64e9}, 7: {"params": 57.03e6, "flops": 167.23e9}},
    "scp": {"params": 44.48e6, "flops": 116.41e9},
    "hroie": {"params": 44.87e6, "flops": 151.00e9},
}

DEFAULT_PROPOSALS = 1000
# detections kept for the mask branch at test time
TEST_MASK_ROIS = 100


@dataclass
class CostReport:
    module: str
    params: int = 0
    weights: int = 0
    biases: int = 0
    norm_affine: int = 0
    reweight: int = 0
    macs: int | None = None
    input_hw: tuple[int, int] | None = None
    breakdown: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def flops(self) -> int | None:
        return None if self.macs is None else 2 * self.macs

    @property
    def params_without_affine(self) -> int:
        return self.params - self.norm_affine

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flops_2x"] = self.flops
        d["params_without_affine"] = self.params_without_affine
        d["input_hw"] = list(self.input_hw) if self.input_hw else None
        return d


def _kind(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "bias":
        return "biases"
    if leaf in ("scale", "shift"):
        return "norm_affine"
    if name.split(".")[0] in ("v_down", "v_up") or ".v_down." in name or ".v_up." in name:
        return "reweight"
    return "weights"


def count_params(model: Module, name: str | None = None) -> CostReport:
    """Exact learnable-parameter count from the model's parameter registry."""
    rep = CostReport(name or type(model).__name__)
    for pname, p in model.named_parameters():
        n = p.size
        rep.params += n
        setattr(rep, _kind(pname), getattr(rep, _kind(pname)) + n)
    return rep


def registry_total(model: Module) -> int:
    """Brute-force product-of-shape sum, independent of :func:`count_params`."""
    total = 0
    for p in model.parameters():
        k = 1
        for s in p.shape:
            k *= s
        total += k
    return total


# -- analytical MACs ---------------------------------------------------------
def conv_macs(cin: int, cout: int, k: int, h_out: int, w_out: int) -> int:
    return cout * cin * k * k * h_out * w_out


def level_sizes(input_hw: tuple[int, int], levels) -> dict[int, tuple[int, int]]:
    h, w = input_hw
    return {i: (-(-h // 2**i), -(-w // 2**i)) for i in levels}


def densefpn_macs(cfg: DenseFPNConfig, input_hw: tuple[int, int]) -> dict[str, int]:
    c, m = cfg.channels, cfg.mid_channels
    conv = scale = 0
    lo, hi = cfg.levels
    for i, (h, w) in level_sizes(input_hw, cfg.level_ids).items():
        npx = h * w
        conv += 2 * npx * (c * m + 9 * m * m + m * c)
        # one scalar multiply per channel-pixel for each weighted cross-level source
        scale += npx * c * ((hi - i) + (i - lo))
    return {"conv": cfg.depth * conv, "reweight": cfg.depth * scale}


def scp_macs(cfg: SCPConfig, input_hw: tuple[int, int]) -> dict[str, int]:
    c, r = cfg.channels, cfg.reduction
    conv = pool = inject = refine = 0
    for _, (h, w) in level_sizes(input_hw, cfg.levels).items():
        npx = h * w
        conv += npx * (2 * c + c * c)
        pool += npx * c
        inject += npx * c
        refine += c * c if r == 1 else 2 * c * (c // r)
    return {"conv": conv, "pooling": pool, "inject": inject, "refine": refine}


def hroie_macs(cfg: HRoIEConfig, det_rois: int = DEFAULT_PROPOSALS,
               mask_rois: int = DEFAULT_PROPOSALS) -> dict[str, int]:
    c, sr = cfg.channels, cfg.sampling_ratio
    n = len(cfg.levels)
    out = {"gate": 0, "hadamard": 0, "roi_align": 0}
    for rois, s in ((det_rois, cfg.det_size), (mask_rois, cfg.mask_size)):
        out["gate"] += rois * n * s * s * 2 * c * c
        out["hadamard"] += rois * n * s * s * c
        out["roi_align"] += rois * n * c * s * s * sr * sr * 4
    return out


def lateral_macs(in_channels: dict[int, int], channels: int, l_max: int,
                 input_hw: tuple[int, int]) -> dict[str, int]:
    levels = sorted(in_channels)
    sizes = level_sizes(input_hw, range(levels[0], l_max + 1))
    conv = sum(conv_macs(in_channels[i], channels, 1, *sizes[i]) for i in levels)
    conv += sum(conv_macs(channels, channels, 3, *sizes[i]) for i in range(levels[-1] + 1, l_max + 1))
    return {"conv": conv}


def count_macs(model: Module, input_hw: tuple[int, int], det_rois: int = DEFAULT_PROPOSALS,
               mask_rois: int = DEFAULT_PROPOSALS) -> CostReport:
    """Analytical MACs of ``model`` for an input image of ``input_hw``."""
    rep = count_params(model)
    rep.input_hw = tuple(input_hw)
    if isinstance(model, DenseFPN):
        rep.breakdown = densefpn_macs(model.cfg, input_hw)
        rep.notes.append("conv MACs plus one multiply per channel-pixel per weighted cross-level source")
    elif isinstance(model, SCP):
        rep.breakdown = scp_macs(model.cfg, input_hw)
        rep.notes.append("key/value/gate 1x1 convs, attention pooling, context refinement and gated injection")
    elif isinstance(model, HRoIE):
        rep.breakdown = hroie_macs(model.cfg, det_rois, mask_rois)
        rep.notes.append(f"per-roi cost; assumes {det_rois} detection rois and {mask_rois} mask rois")
    elif isinstance(model, LateralReducer):
        in_ch = {int(k): v.in_channels for k, v in model.lateral.items()}
        top = max([int(k) for k in model.extra] or [max(in_ch)])
        rep.breakdown = lateral_macs(in_ch, model.channels, top, input_hw)
    elif isinstance(model, Conv2d):
        ho = conv_output_size(input_hw[0], model.kernel_size, model.stride, model.padding)
        wo = conv_output_size(input_hw[1], model.kernel_size, model.stride, model.padding)
        rep.breakdown = {"conv": conv_macs(model.in_channels, model.out_channels, model.kernel_size, ho, wo)}
    elif isinstance(model, CABlock):
        c = model.value.out_channels
        reduction = c // model.refine[0].out_channels if len(model.refine) > 1 else 1
        rep.breakdown = scp_macs(SCPConfig(c, (0,), reduction), input_hw)
    else:
        rep.breakdown = {}
        if rep.params:
            rep.notes.append("no analytical MAC model for this module")
    rep.macs = int(sum(rep.breakdown.values()))
    rep.notes.append("FLOPs reported both as MACs and 2xMACs")
    return rep


# -- closed forms at reference scale ------------------------------------------
def hroie_report(channels: int = 256, n_levels: int = 4) -> CostReport:
    levels = tuple(range(2, 2 + n_levels))
    model = HRoIE(HRoIEConfig(channels=channels, levels=levels)).assign_names()
    rep = count_params(model, "hroie")
    assert rep.params == registry_total(model) == hroie_params(channels, n_levels)
    return rep


def reconcile(det_rois: int = DEFAULT_PROPOSALS, mask_rois: int = DEFAULT_PROPOSALS,
              mid_channels: int = 192) -> list[dict]:
    """Our counts at C=256 next to parameter and FLOP deltas differenced from the reference ablation."""
    base = REFERENCE["baseline"]
    rows = []

    def row(item, ours, ref, tol, gating, note=""):
        rel = abs(ours - ref) / ref
        rows.append({"item": item, "ours": int(ours), "reference": ref, "rel_error": rel,
                     "tolerance": tol, "pass": rel <= tol, "gating": gating, "note": note})

    hroie = HRoIE(HRoIEConfig(channels=256)).assign_names()
    hp = count_params(hroie, "hroie")
    row("hroie.params", hp.params, REFERENCE["hroie"]["params"] - base["params"], 0.01, True,
        f"{hp.weights} gate weights + {hp.biases} biases")

    scp = SCP(SCPConfig(channels=256)).assign_names()
    sp = count_params(scp, "scp")
    row("scp.params", sp.params, REFERENCE["scp"]["params"] - base["params"], 0.02, True,
        f"{sp.weights} weights + {sp.biases} biases")

    cfg = DenseFPNConfig(depth=1, channels=256, mid_channels=mid_channels)
    delta = block_params(cfg)
    d13 = REFERENCE["densefpn"][3]["params"] - REFERENCE["densefpn"][1]["params"]
    row(f"densefpn.block_params@M={mid_channels}", delta, d13, 0.05, True,
        "one block against the depth 1->3 difference")
    alt = block_params(DenseFPNConfig(depth=1, channels=256, mid_channels=128))
    row("densefpn.block_params@M=128", alt, d13 / 2, 0.05, False,
        "one block against half of the depth 1->3 difference")

    hw = (512, 512)
    smacs = sum(scp_macs(SCPConfig(channels=256), hw).values())
    sref = REFERENCE["scp"]["flops"] - base["flops"]
    for label, v in (("macs", smacs), ("2xmacs", 2 * smacs)):
        row(f"scp.flops[{label}]", v, sref, 0.25, False)

    dmacs = sum(densefpn_macs(DenseFPNConfig(depth=1, channels=256, mid_channels=mid_channels), hw).values())
    dref = (REFERENCE["densefpn"][3]["flops"] - REFERENCE["densefpn"][1]["flops"]) / 2
    for label, v in (("macs", dmacs), ("2xmacs", 2 * dmacs)):
        row(f"densefpn.block_flops@M={mid_channels}[{label}]", v, dref, 0.25, False)
    amacs = sum(densefpn_macs(DenseFPNConfig(depth=1, channels=256, mid_channels=128), hw).values())
    for label, v in (("macs", amacs), ("2xmacs", 2 * amacs)):
        row(f"densefpn.block_flops@M=128[{label}]", v, dref, 0.25, False)

    href = REFERENCE["hroie"]["flops"] - base["flops"]
    for n_mask in dict.fromkeys((mask_rois, TEST_MASK_ROIS)):
        hmacs = sum(hroie_macs(HRoIEConfig(channels=256), det_rois, n_mask).values())
        for label, v in (("macs", hmacs), ("2xmacs", 2 * hmacs)):
            row(f"hroie.flops@{det_rois}/{n_mask}[{label}]", v, href, 0.25, False,
                f"{det_rois} detection rois, {n_mask} mask rois")
    return rows
