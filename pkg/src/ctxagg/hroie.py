"""Hierarchical RoI extraction: RoIAlign on every level, then gated fusion.

Per task, RoI features start from zeros and absorb one level at a time::

    F <- F + R_i * sigmoid(W_i [F || R_i])

Detection walks the levels bottom-up (fine to coarse), mask top-down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tracing import record as _record
from .nn import Conv2d, Module
from .pyramid import FeaturePyramid
from .tensor import Tensor, _make, concat_channels, sigmoid


@dataclass
class HRoIEConfig:
    channels: int = 256
    levels: tuple[int, ...] = (2, 3, 4, 5)
    det_size: int = 7
    mask_size: int = 14
    sampling_ratio: int = 2

    def __post_init__(self):
        self.levels = tuple(sorted(self.levels))


DIRECTIONS = {"detection": "bottom_up", "mask": "top_down"}


def clip_rois(rois: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    """Clip ``[batch, x1, y1, x2, y2]`` rows to the image and reject empty boxes."""
    rois = np.array(rois, dtype=np.float64).reshape(-1, 5)
    h, w = image_hw
    rois[:, [1, 3]] = np.clip(rois[:, [1, 3]], 0, w)
    rois[:, [2, 4]] = np.clip(rois[:, [2, 4]], 0, h)
    bad = (rois[:, 3] <= rois[:, 1]) | (rois[:, 4] <= rois[:, 2])
    if bad.any():
        k = int(np.argmax(bad))
        raise ValueError(f"roi {k} is degenerate after clipping: {rois[k, 1:].tolist()}")
    return rois


def _axis_weights(start: np.ndarray, length: np.ndarray, size: int, out: int, sr: int) -> np.ndarray:
    """R×out×size averaged bilinear weights along one axis."""
    r = len(start)
    binsz = length / out
    frac = (np.arange(sr) + 0.5) / sr
    pos = start[:, None, None] + binsz[:, None, None] * (np.arange(out)[None, :, None] + frac[None, None, :])
    valid = (pos >= -1.0) & (pos <= size)
    pos = np.maximum(pos, 0.0)
    low = np.floor(pos).astype(int)
    edge = low >= size - 1
    low = np.where(edge, size - 1, low)
    high = np.where(edge, size - 1, low + 1)
    pos = np.where(edge, low.astype(float), pos)
    lam = pos - low
    wts = np.zeros((r, out, size))
    ri = np.broadcast_to(np.arange(r)[:, None, None], pos.shape)
    pi = np.broadcast_to(np.arange(out)[None, :, None], pos.shape)
    np.add.at(wts, (ri, pi, low), np.where(valid, 1.0 - lam, 0.0) / sr)
    np.add.at(wts, (ri, pi, high), np.where(valid, lam, 0.0) / sr)
    return wts


def roi_align(feat: Tensor, rois: np.ndarray, out_size: int, spatial_scale: float,
              sampling_ratio: int = 2) -> Tensor:
    """RoIAlign with half-pixel alignment; ``rois`` rows are ``[batch, x1, y1, x2, y2]``.

    Each of the S×S bins averages ``sampling_ratio**2`` bilinear samples. The
    sampling grid is a tensor product, so the crop is ``Wy @ X @ Wx.T`` per roi.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    n, c, h, w = feat.shape
    r, s = len(rois), out_size
    if np.any((rois[:, 3] <= rois[:, 1]) | (rois[:, 4] <= rois[:, 2])):
        raise ValueError("roi_align: degenerate roi")
    bidx = rois[:, 0].astype(int)
    if r and (bidx.min() < 0 or bidx.max() >= n):
        raise ValueError(f"roi_align: batch index out of range for {n} images")
    x0 = rois[:, 1] * spatial_scale - 0.5
    y0 = rois[:, 2] * spatial_scale - 0.5
    wy = _axis_weights(y0, (rois[:, 4] - rois[:, 2]) * spatial_scale, h, s, sampling_ratio).astype(feat.dtype)
    wx = _axis_weights(x0, (rois[:, 3] - rois[:, 1]) * spatial_scale, w, s, sampling_ratio).astype(feat.dtype)
    _record("roi_align", r * c * s * s * sampling_ratio * sampling_ratio * 4)

    out = np.zeros((r, c, s, s), dtype=feat.dtype)
    groups = [(b, np.nonzero(bidx == b)[0]) for b in np.unique(bidx)]
    for b, idx in groups:
        k = len(idx)
        xb = feat.data[b].transpose(1, 0, 2).reshape(h, c * w)  # H × (C·W)
        tmp = (wy[idx].reshape(k * s, h) @ xb).reshape(k, s * c, w)
        res = tmp @ wx[idx].transpose(0, 2, 1)  # k × (S·C) × S
        out[idx] = res.reshape(k, s, c, s).transpose(0, 2, 1, 3)

    def backward(g):
        gx = np.zeros_like(feat.data)
        for b, idx in groups:
            k = len(idx)
            gp = g[idx].transpose(0, 2, 1, 3).reshape(k, s * c, s)
            gtmp = (gp @ wx[idx]).reshape(k * s, c * w)
            gb = wy[idx].reshape(k * s, h).T @ gtmp  # H × (C·W)
            gx[b] += gb.reshape(h, c, w).transpose(1, 0, 2)
        feat._accumulate(gx)

    return _make(out, (feat,), backward, "roi_align")


def fuse(crops: dict[int, Tensor], cells: dict[str, Conv2d], direction: str,
         trace: list | None = None, gates: dict | None = None) -> Tensor:
    """Hierarchical gated accumulation of per-level crops.

    ``trace`` receives the visiting order; ``gates`` receives each level's gate array.
    """
    if set(str(i) for i in crops) != set(cells):
        raise ValueError(f"crop levels {sorted(crops)} do not match cells {sorted(cells, key=int)}")
    if direction not in ("bottom_up", "top_down"):
        raise ValueError(f"unknown direction {direction!r}")
    order = sorted(crops, reverse=direction == "top_down")
    first = crops[order[0]]
    f = Tensor(np.zeros(first.shape, dtype=first.dtype))
    for i in order:
        r = crops[i]
        gate = sigmoid(cells[str(i)](concat_channels([f, r])))
        f = f + r * gate
        if trace is not None:
            trace.append(i)
        if gates is not None:
            gates[i] = gate.data
    return f


class HRoIE(Module):
    def __init__(self, cfg: HRoIEConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.channels
        self.det = {str(i): Conv2d(2 * c, c, 1, init="zeros", rng=rng, dtype=dtype) for i in cfg.levels}
        self.mask = {str(i): Conv2d(2 * c, c, 1, init="zeros", rng=rng, dtype=dtype) for i in cfg.levels}

    def cells(self, task: str) -> dict[str, Conv2d]:
        return self.det if task == "detection" else self.mask

    def forward(self, pyr: FeaturePyramid, rois: np.ndarray, task: str, trace: list | None = None,
                gates: dict | None = None) -> Tensor:
        return extract(pyr, rois, task, self, trace, gates)


def extract(pyr: FeaturePyramid, rois: np.ndarray, task: str, model: HRoIE,
            trace: list | None = None, gates: dict | None = None) -> Tensor:
    """Per-roi fused features, R×C×S×S, for ``task`` in {detection, mask}."""
    if task not in DIRECTIONS:
        raise ValueError(f"unknown task {task!r}")
    cfg = model.cfg
    missing = [i for i in cfg.levels if i not in pyr.levels]
    if missing:
        raise ValueError(f"extraction levels {missing} missing from pyramid")
    if pyr.input_hw is not None:
        rois = clip_rois(rois, pyr.input_hw)
    size = cfg.det_size if task == "detection" else cfg.mask_size
    crops = {i: roi_align(pyr[i], rois, size, 1.0 / 2**i, cfg.sampling_ratio) for i in cfg.levels}
    return fuse(crops, model.cells(task), DIRECTIONS[task], trace, gates)


def hroie_params(channels: int, n_levels: int = 4, n_paths: int = 2, bias: bool = True) -> int:
    return n_paths * n_levels * (2 * channels * channels + (channels if bias else 0))


def assign_levels(rois: np.ndarray, levels: tuple[int, ...], canonical_scale: float = 224.0,
                  canonical_level: int = 4) -> np.ndarray:
    """Single-level assignment by box scale, as in the usual FPN RoI mapping."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    scale = np.sqrt((rois[:, 3] - rois[:, 1]) * (rois[:, 4] - rois[:, 2]))
    k = np.floor(canonical_level + np.log2(scale / canonical_scale + 1e-8))
    return np.clip(k, min(levels), max(levels)).astype(int)


class SingleLevelExtractor(Module):
    """Baseline extractor: each roi is cropped from one level only. No parameters."""

    def __init__(self, cfg: HRoIEConfig, canonical_scale: float = 224.0):
        self.cfg = cfg
        self.canonical_scale = canonical_scale

    def forward(self, pyr: FeaturePyramid, rois: np.ndarray, task: str, trace=None) -> Tensor:
        from .tensor import concat

        cfg = self.cfg
        if pyr.input_hw is not None:
            rois = clip_rois(rois, pyr.input_hw)
        size = cfg.det_size if task == "detection" else cfg.mask_size
        lvl = assign_levels(rois, cfg.levels, self.canonical_scale)
        pieces, order = [], []
        for i in cfg.levels:
            idx = np.nonzero(lvl == i)[0]
            if len(idx):
                pieces.append(roi_align(pyr[i], rois[idx], size, 1.0 / 2**i, cfg.sampling_ratio))
                order.append(idx)
        out = concat(pieces, axis=0)
        perm = np.argsort(np.concatenate(order))
        return out[perm]
