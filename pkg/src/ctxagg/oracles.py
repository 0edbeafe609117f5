"""Slow, loop-based reference implementations used to cross-check the vectorised ops.

Nothing here touches the autodiff graph; every function works on plain arrays
with explicit Python loops so it shares no code path with the fast versions.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i * stride + u - padding, j * stride + v - padding
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[a, c, y, xx] * w[o, c, u, v]
                    out[a, o, i, j] = acc
    return out


def maxpool2d(x, window, stride=None):
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for k in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[a, k, i, j] = max(
                        x[a, k, i * stride + u, j * stride + v] for u in range(window) for v in range(window)
                    )
    return out


def bilinear_sample(img, y, x):
    """Value at continuous pixel coordinates, edges clamped."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def bilinear_resize(x, out_h, out_w):
    """Half-pixel-centre bilinear resize, one output pixel at a time."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for a in range(n):
        for k in range(c):
            for i in range(out_h):
                for j in range(out_w):
                    sy = (i + 0.5) * h / out_h - 0.5
                    sx = (j + 0.5) * w / out_w - 0.5
                    out[a, k, i, j] = bilinear_sample(x[a, k], sy, sx)
    return out


def softmax(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [v / s for v in e]


def _roi_sample(img, y, x):
    h, w = img.shape
    if y < -1.0 or y > h or x < -1.0 or x > w:
        return 0.0
    y, x = max(y, 0.0), max(x, 0.0)
    y0, x0 = int(y), int(x)
    if y0 >= h - 1:
        y0 = y1 = h - 1
        y = float(y0)
    else:
        y1 = y0 + 1
    if x0 >= w - 1:
        x0 = x1 = w - 1
        x = float(x0)
    else:
        x1 = x0 + 1
    ly, lx = y - y0, x - x0
    return ((1 - ly) * (1 - lx) * img[y0, x0] + (1 - ly) * lx * img[y0, x1]
            + ly * (1 - lx) * img[y1, x0] + ly * lx * img[y1, x1])


def roi_align(feat, rois, out_size, spatial_scale, sampling_ratio=2):
    """Aligned RoIAlign evaluated sample by sample."""
    r, s, sr = len(rois), out_size, sampling_ratio
    c = feat.shape[1]
    out = np.zeros((r, c, s, s))
    for k, (b, x1, y1, x2, y2) in enumerate(rois):
        sx, sy = x1 * spatial_scale - 0.5, y1 * spatial_scale - 0.5
        bw = (x2 - x1) * spatial_scale / s
        bh = (y2 - y1) * spatial_scale / s
        for ch in range(c):
            img = feat[int(b), ch]
            for py in range(s):
                for px in range(s):
                    acc = 0.0
                    for iy in range(sr):
                        for ix in range(sr):
                            y = sy + py * bh + (iy + 0.5) * bh / sr
                            x = sx + px * bw + (ix + 0.5) * bw / sr
                            acc += _roi_sample(img, y, x)
                    out[k, ch, py, px] = acc / (sr * sr)
    return out


def cablock(p, key_w, key_b, value_w, value_b, gate_w, gate_b, refine):
    """Context block by per-pixel loops.

    Weights are plain matrices (out × in). ``refine`` is a list of
    ``("linear", W, b)``, ``("affine", scale, shift)`` and ``("relu",)`` steps.
    """
    n, c, h, w = p.shape
    out = np.zeros_like(p, dtype=np.float64)
    for a in range(n):
        pix = [p[a, :, i, j] for i in range(h) for j in range(w)]
        alpha = softmax([float(key_w[0] @ v + key_b[0]) for v in pix])
        gate = softmax([float(gate_w[0] @ v + gate_b[0]) for v in pix])
        pooled = np.zeros(value_w.shape[0])
        for al, v in zip(alpha, pix):
            pooled += al * (value_w @ v + value_b)
        ctx = pooled
        for step in refine:
            if step[0] == "linear":
                ctx = step[1] @ ctx + step[2]
            elif step[0] == "affine":
                ctx = ctx * step[1] + step[2]
            else:
                ctx = np.maximum(ctx, 0.0)
        for q, (g, v) in enumerate(zip(gate, pix)):
            out[a, :, q // w, q % w] = v + g * ctx
    return out


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def soft_nms(boxes, scores, iou_threshold=0.5, score_floor=0.001):
    """Linear Soft-NMS on Python lists; returns ``[(index, score), ...]`` in selection order."""
    live = {i: float(s) for i, s in enumerate(scores) if s >= score_floor}
    kept = []
    while live:
        best = min(live, key=lambda i: (-live[i], i))
        kept.append((best, live.pop(best)))
        for i in list(live):
            ov = box_iou(boxes[best], boxes[i])
            if ov > iou_threshold:
                live[i] *= 1.0 - ov
            if live[i] < score_floor:
                del live[i]
    return kept
