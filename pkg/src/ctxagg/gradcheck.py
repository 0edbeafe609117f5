"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonFiniteError(FloatingPointError):
    """A non-finite value turned up during a gradient check."""


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to every entry of ``t``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data)
            flat[i] = orig - eps
            fm = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = tuple(int(v) for v in np.unravel_index(i, t.shape))
                raise NonFiniteError(f"non-finite objective when perturbing coordinate {idx}")
            grad.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest ``|analytic - numeric| / max(1, |analytic|, |numeric|)`` over all coordinates.

    ``fn`` must be deterministic and return a scalar tensor built from ``params``.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = fn()
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite objective value")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for k, (p, a) in enumerate(zip(params, analytic)):
        bad = np.argwhere(~np.isfinite(a))
        if len(bad):
            raise NonFiniteError(f"non-finite analytic gradient in tensor {k} at {tuple(int(v) for v in bad[0])}")
        num = numeric_grad(fn, p, eps)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
        err = np.abs(a - num) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    for p in params:
        p.grad = None
    return worst
