"""A small two-stage instance segmenter wired around the context modules."""

from __future__ import annotations

import numpy as np

from ..config import resolve
from ..densefpn import DenseFPN, DenseFPNConfig
from ..hroie import HRoIE, HRoIEConfig, SingleLevelExtractor
from ..nn import Conv2d, Linear, Module
from ..pyramid import FeaturePyramid, LateralReducer
from ..scp import SCP, SCPConfig
from ..tensor import Tensor, relu, reshape

IMAGE_MEAN = 0.45
IMAGE_STD = 0.25


class Backbone(Module):
    """Stride-2 conv stages emitting C2..C5 (1/4 .. 1/32 of the input)."""

    def __init__(self, widths, rng, dtype):
        c2, c3, c4, c5 = widths
        self.stem = Conv2d(3, c2, 3, stride=2, init="kaiming", rng=rng, dtype=dtype)
        self.stages = [
            Conv2d(c2, c2, 3, stride=2, init="kaiming", rng=rng, dtype=dtype),
            Conv2d(c2, c3, 3, stride=2, init="kaiming", rng=rng, dtype=dtype),
            Conv2d(c3, c4, 3, stride=2, init="kaiming", rng=rng, dtype=dtype),
            Conv2d(c4, c5, 3, stride=2, init="kaiming", rng=rng, dtype=dtype),
        ]

    def forward(self, x: Tensor) -> dict[int, Tensor]:
        x = relu(self.stem(x))
        feats = {}
        for level, conv in zip(range(2, 6), self.stages):
            x = relu(conv(x))
            feats[level] = x
        return feats


class BoxHead(Module):
    def __init__(self, channels, size, hidden, num_classes, rng, dtype):
        self.fc = Linear(channels * size * size, hidden, init="kaiming", rng=rng, dtype=dtype)
        self.cls = Linear(hidden, num_classes + 1, init="normal:0.01", rng=rng, dtype=dtype)
        self.box = Linear(hidden, 4, init="normal:0.001", rng=rng, dtype=dtype)

    def forward(self, f: Tensor):
        h = relu(self.fc(reshape(f, (f.shape[0], -1))))
        return self.cls(h), self.box(h)


class MaskHead(Module):
    def __init__(self, channels, rng, dtype):
        self.conv1 = Conv2d(channels, channels, 3, init="kaiming", rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, init="kaiming", rng=rng, dtype=dtype)
        self.out = Conv2d(channels, 1, 1, init="normal:0.01", rng=rng, dtype=dtype)

    def forward(self, f: Tensor) -> Tensor:
        y = self.out(relu(self.conv2(relu(self.conv1(f)))))
        return reshape(y, (y.shape[0], y.shape[2], y.shape[3]))


class ToyDetector(Module):
    """Backbone, lateral reducer, optional DenseFPN / SCP, RoI extractor and heads."""

    def __init__(self, config: dict | None = None, seed: int | None = None):
        cfg = resolve(config)
        self._config = cfg
        dtype = np.float32 if cfg["precision"] == "float32" else np.float64
        self._dtype = dtype
        rng = np.random.default_rng(cfg["seed"] if seed is None else seed)
        m, d, s, h = cfg["model"], cfg["densefpn"], cfg["scp"], cfg["hroie"]
        c = d["channels"]
        lo, hi = d["levels"]
        widths = m["backbone_channels"]
        self.backbone = Backbone(widths, rng, dtype)
        self.lateral = LateralReducer(dict(zip(range(2, 6), widths)), c, l_max=hi, rng=rng, dtype=dtype)
        self.densefpn = (
            DenseFPN(DenseFPNConfig(d["depth"], c, d["mid_channels"], (lo, hi)), rng, dtype)
            if d["enabled"] else None
        )
        self.scp = SCP(SCPConfig(c, tuple(s["levels"]), s["reduction"]), rng, dtype) if s["enabled"] else None
        hcfg = HRoIEConfig(c, tuple(h["levels"]), h["det_size"], h["mask_size"], h["sampling_ratio"])
        self.extractor = HRoIE(hcfg, rng, dtype) if h["enabled"] else SingleLevelExtractor(hcfg, m["canonical_scale"])
        self.box_head = BoxHead(c, h["det_size"], m["head_hidden"], m["num_classes"], rng, dtype)
        self.mask_head = MaskHead(c, rng, dtype)
        self.assign_names()

    @property
    def config(self) -> dict:
        return self._config

    @property
    def dtype(self):
        return self._dtype

    @property
    def num_classes(self) -> int:
        return self._config["model"]["num_classes"]

    def neck(self, images) -> FeaturePyramid:
        """Pyramid after the lateral reducer and DenseFPN, before SCP."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self._dtype))
        x = (x - IMAGE_MEAN) * (1.0 / IMAGE_STD)
        pyr = self.lateral(self.backbone(x))
        if self.densefpn is not None:
            pyr = self.densefpn(pyr)
        return pyr

    def features(self, images) -> FeaturePyramid:
        pyr = self.neck(images)
        if self.scp is not None:
            pyr = self.scp(pyr)
        return pyr

    def detect(self, pyr: FeaturePyramid, proposals: np.ndarray):
        fb = self.extractor(pyr, proposals, "detection")
        return self.box_head(fb)

    def segment(self, pyr: FeaturePyramid, proposals: np.ndarray) -> Tensor:
        return self.mask_head(self.extractor(pyr, proposals, "mask"))

    def forward(self, images, proposals: np.ndarray) -> dict[str, Tensor]:
        return forward_detector(self, images, proposals)


def forward_detector(model: ToyDetector, images, proposals: np.ndarray) -> dict[str, Tensor]:
    """Per-proposal class logits (R×(K+1)), box deltas (R×4) and mask logits (R×S×S).

    ``proposals`` rows are ``[batch, x1, y1, x2, y2]`` in image pixels.
    """
    pyr = model.features(images)
    cls, box = model.detect(pyr, proposals)
    return {"cls_logits": cls, "box_deltas": box, "mask_logits": model.segment(pyr, proposals)}
