"""Spatial Context Pyramid: a gated global-context block per pyramid level.

For a level map P with pixels m = 1..N::

    alpha = softmax_m(w_k . P^m)                 attention over pixels
    ctx   = refine(sum_m alpha_m * (w_v P^m))    one C-vector per sample
    gate  = softmax_m(w_a . P^m)                 per-pixel share of the context
    Q^j   = P^j + gate^j * ctx
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, FrozenAffine, Module
from .pyramid import FeaturePyramid
from .tensor import Tensor, matmul, relu, reshape, softmax, transpose


@dataclass
class SCPConfig:
    channels: int = 256
    levels: tuple[int, ...] = (2, 3, 4, 5, 6)
    reduction: int = 1

    def __post_init__(self):
        self.levels = tuple(self.levels)
        if self.reduction < 1 or self.channels % self.reduction:
            raise ValueError(f"reduction {self.reduction} must divide channels {self.channels}")


class CABlock(Module):
    def __init__(self, channels: int, reduction: int = 1, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.key = Conv2d(channels, 1, 1, rng=rng, dtype=dtype)
        self.value = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.gate = Conv2d(channels, 1, 1, rng=rng, dtype=dtype)
        if reduction == 1:
            self.refine = [Conv2d(channels, channels, 1, init="zeros", rng=rng, dtype=dtype)]
        else:
            mid = channels // reduction
            self.refine = [
                Conv2d(channels, mid, 1, rng=rng, dtype=dtype),
                FrozenAffine(mid, dtype),
                Conv2d(mid, channels, 1, init="zeros", rng=rng, dtype=dtype),
            ]

    def attention_map(self, p: Tensor) -> Tensor:
        return attention_map(p, self.key)

    def gate_map(self, p: Tensor) -> Tensor:
        return gate_map(p, self.gate)

    def context_vector(self, p: Tensor, alpha: Tensor) -> Tensor:
        return context_vector(p, alpha, self.value, self.refine)

    def forward(self, p: Tensor) -> Tensor:
        return cablock_forward(p, self)


def _pixel_softmax(p: Tensor, conv: Conv2d) -> Tensor:
    n, _, h, w = p.shape
    return softmax(reshape(conv(p), (n, 1, h * w)), axis=2)


def attention_map(p: Tensor, key: Conv2d) -> Tensor:
    """N×1×(H·W) softmax over pixels of the key projection."""
    return _pixel_softmax(p, key)


def gate_map(p: Tensor, gate: Conv2d) -> Tensor:
    """N×1×H×W softmax over pixels of the gate projection."""
    n, _, h, w = p.shape
    return reshape(_pixel_softmax(p, gate), (n, 1, h, w))


def _refine(x: Tensor, refine) -> Tensor:
    if len(refine) == 1:
        return refine[0](x)
    conv1, norm, conv2 = refine
    return conv2(relu(norm(conv1(x))))


def context_vector(p: Tensor, alpha: Tensor, value: Conv2d, refine) -> Tensor:
    """N×C×1×1 refined, attention-pooled value projection."""
    n, _, h, w = p.shape
    v = reshape(value(p), (n, value.out_channels, h * w))
    pooled = matmul(v, transpose(alpha, (0, 2, 1)))  # N×C×1
    return _refine(reshape(pooled, (n, value.out_channels, 1, 1)), refine)


def cablock_forward(p: Tensor, block: CABlock) -> Tensor:
    alpha = block.attention_map(p)
    ctx = block.context_vector(p, alpha)
    a = block.gate_map(p)
    return p + a * ctx


def cablock_trace(p: Tensor, block: CABlock) -> dict[str, Tensor]:
    """Forward pass that also returns the intermediate maps."""
    alpha = block.attention_map(p)
    ctx = block.context_vector(p, alpha)
    a = block.gate_map(p)
    return {"alpha": alpha, "ctx": ctx, "gate": a, "out": p + a * ctx}


class SCP(Module):
    def __init__(self, cfg: SCPConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.blocks = {str(i): CABlock(cfg.channels, cfg.reduction, rng, dtype) for i in cfg.levels}

    def forward(self, pyr: FeaturePyramid) -> FeaturePyramid:
        return scp_forward(pyr, self)


def scp_forward(pyr: FeaturePyramid, model: SCP) -> FeaturePyramid:
    missing = [i for i in model.cfg.levels if i not in pyr.levels]
    if missing:
        raise ValueError(f"SCP levels {missing} are not in the pyramid {list(pyr.levels)}")
    out = {i: (model.blocks[str(i)](t) if str(i) in model.blocks else t) for i, t in pyr.items()}
    return pyr.replace(out)


def cablock_params(channels: int, reduction: int = 1, bias: bool = True) -> int:
    """Closed-form parameter count of one CABlock."""
    c = channels
    n = 2 * c + c * c  # key, gate, value weights
    if bias:
        n += 2 + c
    if reduction == 1:
        n += c * c + (c if bias else 0)
    else:
        mid = c // reduction
        n += 2 * c * mid + 2 * mid
        if bias:
            n += mid + c
    return n
