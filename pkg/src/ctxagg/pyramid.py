"""Feature pyramids and the lateral channel reducer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nn import Conv2d, Module
from .tensor import Tensor


@dataclass
class FeaturePyramid:
    """Level-indexed maps; level ``i`` sits at ``1/2**i`` of the input resolution."""

    levels: dict[int, Tensor]
    input_hw: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.levels = dict(sorted(self.levels.items()))

    @property
    def l_min(self) -> int:
        return min(self.levels)

    @property
    def l_max(self) -> int:
        return max(self.levels)

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[1]

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def items(self):
        return self.levels.items()

    def shapes(self) -> dict[int, tuple[int, ...]]:
        return {i: t.shape for i, t in self.levels.items()}

    def replace(self, levels: Mapping[int, Tensor]) -> "FeaturePyramid":
        return FeaturePyramid(dict(levels), self.input_hw, dict(self.meta))

    def validate(self) -> "FeaturePyramid":
        idx = list(self.levels)
        if idx != list(range(idx[0], idx[-1] + 1)):
            raise ValueError(f"pyramid levels are not contiguous: {idx}")
        first = self.levels[idx[0]]
        for i, t in self.levels.items():
            if t.ndim != 4:
                raise ValueError(f"level {i}: expected N×C×H×W, got {t.shape}")
            if t.shape[:2] != first.shape[:2]:
                raise ValueError(f"level {i}: N,C {t.shape[:2]} differ from level {idx[0]} {first.shape[:2]}")
            if self.input_hw is not None:
                want = tuple(-(-s // 2**i) for s in self.input_hw)
                if t.shape[2:] != want:
                    raise ValueError(f"level {i}: spatial size {t.shape[2:]} != {want} for input {self.input_hw}")
        return self


def make_synthetic_pyramid(seed: int, n: int, c: int, h: int, w: int, l_min: int, l_max: int,
                           dtype=np.float64) -> FeaturePyramid:
    """Unit-normal random pyramid for an ``h``×``w`` input; deterministic in ``seed``."""
    if l_min > l_max:
        raise ValueError(f"l_min {l_min} > l_max {l_max}")
    step = 2**l_max
    if h % step or w % step:
        raise ValueError(f"input size {(h, w)} is not divisible by 2**{l_max}")
    rng = np.random.default_rng(seed)
    levels = {
        i: Tensor(rng.standard_normal((n, c, h >> i, w >> i)).astype(dtype))
        for i in range(l_min, l_max + 1)
    }
    return FeaturePyramid(levels, (h, w)).validate()


# lateral 1x1 convs carry a bias and no normalisation; checkpoints record this
LATERAL_LAYOUT = {"bias": True, "norm": False}


class LateralReducer(Module):
    """1×1 convs bringing every backbone level to a common width, plus stride-2 3×3 extras."""

    def __init__(self, in_channels: Mapping[int, int], channels: int = 256, l_max: int = 6,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_levels = sorted(in_channels)
        self.channels = channels
        self.lateral = {
            str(i): Conv2d(in_channels[i], channels, 1, init="lecun", rng=rng, dtype=dtype) for i in self.in_levels
        }
        top = self.in_levels[-1]
        self.extra = {
            str(i): Conv2d(channels, channels, 3, stride=2, padding=1, init="lecun", rng=rng, dtype=dtype)
            for i in range(top + 1, l_max + 1)
        }

    def forward(self, feats: Mapping[int, Tensor]) -> FeaturePyramid:
        return reduce_laterals(feats, self)


def reduce_laterals(feats: Mapping[int, Tensor], reducer: LateralReducer) -> FeaturePyramid:
    levels = sorted(feats)
    if levels != reducer.in_levels:
        raise ValueError(f"expected backbone levels {reducer.in_levels}, got {levels}")
    for a, b in zip(levels, levels[1:]):
        ha, wa = feats[a].shape[2:]
        hb, wb = feats[b].shape[2:]
        if (ha, wa) != (2 * hb, 2 * wb):
            raise ValueError(f"level {b} size {(hb, wb)} is not half of level {a} size {(ha, wa)}")
    out = {i: reducer.lateral[str(i)](feats[i]) for i in levels}
    prev = out[levels[-1]]
    for key in sorted(reducer.extra, key=int):
        prev = reducer.extra[key](prev)
        out[int(key)] = prev
    h, w = feats[levels[0]].shape[2:]
    return FeaturePyramid(out, (h * 2 ** levels[0], w * 2 ** levels[0]))
