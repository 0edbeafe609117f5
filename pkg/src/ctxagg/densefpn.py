"""DenseFPN: stacked blocks of dense top-down and bottom-up cross-level fusion.

Each block computes, for every level ``i``::

    down_i = T_down_i(x_i + sum_{j > i} resize(x_j) * softmax(v_down_i)[j])
    up_i   = T_up_i(x_i + down_i + sum_{j < i} resize(down_j) * softmax(v_up_i)[j])

where ``T`` is a ReLU followed by a linear 1×1 / 3×3 / 1×1 bottleneck and the
block output is ``{up_i}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import resize_to
from .nn import Conv2d, FrozenAffine, Module, Parameter
from .pyramid import FeaturePyramid
from .tensor import Tensor, relu, softmax


@dataclass
class DenseFPNConfig:
    depth: int = 5
    channels: int = 256
    mid_channels: int = 192
    levels: tuple[int, int] = (2, 6)
    norm: bool = False

    def __post_init__(self):
        self.levels = tuple(self.levels)
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.levels[0] > self.levels[1]:
            raise ValueError(f"bad level range {self.levels}")

    @property
    def level_ids(self) -> list[int]:
        return list(range(self.levels[0], self.levels[1] + 1))


class TransformBlock(Module):
    """ReLU, then 1×1 reduce, 3×3, 1×1 expand with no further activations."""

    def __init__(self, channels: int, mid: int, norm: bool = False, rng=None, dtype=np.float64):
        self.reduce = Conv2d(channels, mid, 1, init="kaiming", rng=rng, dtype=dtype)
        self.conv = Conv2d(mid, mid, 3, init="lecun", rng=rng, dtype=dtype)
        self.expand = Conv2d(mid, channels, 1, init="lecun", rng=rng, dtype=dtype)
        self.norm1 = FrozenAffine(mid, dtype) if norm else None
        self.norm2 = FrozenAffine(mid, dtype) if norm else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.reduce(relu(x))
        if self.norm1 is not None:
            y = self.norm1(y)
        y = self.conv(y)
        if self.norm2 is not None:
            y = self.norm2(y)
        return self.expand(y)


def normalize_weights(raw: Tensor) -> Tensor:
    return softmax(raw, axis=0)


class DenseFPNBlock(Module):
    def __init__(self, cfg: DenseFPNConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        lo, hi = cfg.levels
        levels = cfg.level_ids
        self.levels = levels
        self.down = {str(i): TransformBlock(cfg.channels, cfg.mid_channels, cfg.norm, rng, dtype) for i in levels}
        self.up = {str(i): TransformBlock(cfg.channels, cfg.mid_channels, cfg.norm, rng, dtype) for i in levels}
        self.v_down = {str(i): Parameter(np.zeros(hi - i, dtype=dtype), "zeros") for i in levels if i < hi}
        self.v_up = {str(i): Parameter(np.zeros(i - lo, dtype=dtype), "zeros") for i in levels if i > lo}

    def forward(self, pyr: FeaturePyramid) -> FeaturePyramid:
        down = topdown_aggregate(pyr, self)
        return bottomup_aggregate(pyr, down, self)


def _check(pyr: FeaturePyramid, block: DenseFPNBlock):
    if list(pyr.levels) != block.levels:
        raise ValueError(f"pyramid levels {list(pyr.levels)} != block levels {block.levels}")
    want = block.down[str(block.levels[0])].reduce.in_channels
    for i, t in pyr.items():
        if t.shape[1] != want:
            raise ValueError(f"level {i} has {t.shape[1]} channels, block expects {want}")


def topdown_aggregate(pyr: FeaturePyramid, block: DenseFPNBlock) -> dict[int, Tensor]:
    _check(pyr, block)
    hi = block.levels[-1]
    out = {}
    for i in block.levels:
        x = pyr[i]
        fused = x
        if i < hi:
            w = normalize_weights(block.v_down[str(i)])
            for k, j in enumerate(range(i + 1, hi + 1)):
                fused = fused + resize_to(pyr[j], *x.shape[2:]) * w[k]
        out[i] = block.down[str(i)](fused)
    return out


def bottomup_aggregate(pyr: FeaturePyramid, down: dict[int, Tensor], block: DenseFPNBlock) -> FeaturePyramid:
    _check(pyr, block)
    lo = block.levels[0]
    out = {}
    for i in block.levels:
        x = pyr[i]
        fused = x + down[i]
        if i > lo:
            w = normalize_weights(block.v_up[str(i)])
            for k, j in enumerate(range(lo, i)):
                fused = fused + resize_to(down[j], *x.shape[2:]) * w[k]
        out[i] = block.up[str(i)](fused)
    return pyr.replace(out)


class DenseFPN(Module):
    def __init__(self, cfg: DenseFPNConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.blocks = [DenseFPNBlock(cfg, rng, dtype) for _ in range(cfg.depth)]

    def forward(self, pyr: FeaturePyramid) -> FeaturePyramid:
        return densefpn_forward(pyr, self)


def densefpn_forward(pyr: FeaturePyramid, model: DenseFPN) -> FeaturePyramid:
    if pyr.channels != model.cfg.channels:
        raise ValueError(f"pyramid has {pyr.channels} channels, DenseFPN expects {model.cfg.channels}")
    for block in model.blocks:
        pyr = block(pyr)
    return pyr


def transform_params(channels: int, mid: int, norm: bool = False, bias: bool = True) -> int:
    n = channels * mid + 9 * mid * mid + mid * channels
    if bias:
        n += mid + mid + channels
    if norm:
        n += 4 * mid
    return n


def block_params(cfg: DenseFPNConfig, bias: bool = True) -> int:
    """Closed-form learnable parameter count of one block."""
    n_levels = len(cfg.level_ids)
    return 2 * n_levels * transform_params(cfg.channels, cfg.mid_channels, cfg.norm, bias) + n_levels * (n_levels - 1)
