"""Spatial operations on N×C×H×W tensors and the training losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _make, as_tensor
from .tracing import record as _record


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``weight`` is Cout×Cin×kh×kw."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input shape {x.shape} does not match kernel shape {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match kernel shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel shape {weight.shape} too large for input shape {x.shape}")
    _record("conv2d", cout * cin * kh * kw * ho * wo * n)

    wd = weight.data
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        xs = np.ascontiguousarray(xs[:, :, :ho, :wo]).reshape(n, cin, ho * wo)
        w2 = wd[:, :, 0, 0]
        out = (w2 @ xs).reshape(n, cout, ho, wo)

        def backward_x(g):
            gx = (w2.T @ g.reshape(n, cout, ho * wo)).reshape(n, cin, ho, wo)
            if stride == 1:
                return gx
            full = np.zeros_like(x.data)
            full[:, :, : ho * stride : stride, : wo * stride : stride] = gx
            return full

        def backward_w(g):
            g3 = g.reshape(n, cout, ho * wo)
            return (g3 @ xs.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # rows ordered (n, ho, wo), columns (cin, kh, kw)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
        wmat = wd.reshape(cout, -1)
        out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

        def backward_x(g):
            # n × (cin·kh·kw) × (ho·wo), already laid out as (n, cin, kh, kw, ho, wo)
            dcols = (wmat.T @ g.reshape(n, cout, ho * wo)).reshape(n, cin, kh, kw, ho, wo)
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            if padding:
                gp = gp[:, :, padding:-padding, padding:-padding]
            return gp

        def backward_w(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            return (g2.T @ cols).reshape(wd.shape)

    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        if x.requires_grad:
            x._accumulate(backward_x(g))
        if weight.requires_grad:
            weight._accumulate(backward_w(g))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling without padding.

    The gradient goes to the argmax cell of each window; ties resolve to the
    lowest linear index.
    """
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"maxpool2d: window {window} exceeds spatial extent {(h, w)}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, rows, cols), g)
        x._accumulate(gx)

    return _make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic out×in interpolation matrix with half-pixel centres."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    if in_size == out_size:
        np.fill_diagonal(m, 1.0)
        return m
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling, half-pixel centres (``align_corners=False``)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: bad output size {(out_h, out_w)}")
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize: expected N×C×H×W, got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: x._accumulate(g), "resize")
    ry = bilinear_matrix(h, out_h, x.dtype)
    rx = bilinear_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        x._accumulate(ry.T @ g @ rx)

    return _make(out, (x,), backward, "resize")


def resize_to(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample to a target size: bilinear when enlarging, max pooling when shrinking."""
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    if out_h >= h and out_w >= w:
        return bilinear_resize(x, out_h, out_w)
    if h % out_h or w % out_w or h // out_h != w // out_w:
        raise ValueError(f"resize_to: cannot pool {(h, w)} down to {(out_h, out_w)}")
    k = h // out_h
    return maxpool2d(x, k, k)


# -- losses -----------------------------------------------------------------
def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows; ``targets`` holds class indices."""
    targets = np.asarray(targets, dtype=int)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    r = len(targets)
    loss = -logp[np.arange(r), targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(r), targets] -= 1.0
        logits._accumulate(g * p / r)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Sum of smooth-L1 over the last axis, averaged over rows."""
    target = np.asarray(target, dtype=pred.dtype)
    d = pred.data - target
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    r = max(pred.shape[0], 1)
    loss = per.sum() / r

    def backward(g):
        pred._accumulate(g * np.where(quad, d / beta, np.sign(d)) / r)

    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "smooth_l1")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits."""
    t = np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = max(x.size, 1)
    loss = per.sum() / n

    def backward(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        logits._accumulate(g * (s - t) / n)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "bce_with_logits")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for 2-D ``x``; weight is out×in."""
    from .tensor import matmul, transpose

    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    _record("linear", x.shape[0] * weight.shape[0] * weight.shape[1])
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = out + as_tensor(bias)
    return out
