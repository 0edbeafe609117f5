"""Box geometry, delta coding and Soft-NMS."""

from __future__ import annotations

import numpy as np

DELTA_WEIGHTS = np.array([10.0, 10.0, 5.0, 5.0])


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``x1, y1, x2, y2`` boxes, len(a)×len(b)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pw, ph = proposals[:, 2] - proposals[:, 0], proposals[:, 3] - proposals[:, 1]
    px, py = proposals[:, 0] + 0.5 * pw, proposals[:, 1] + 0.5 * ph
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    d = np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)
    return d * DELTA_WEIGHTS


def decode(proposals: np.ndarray, deltas: np.ndarray, clip_hw: tuple[int, int] | None = None) -> np.ndarray:
    d = deltas / DELTA_WEIGHTS
    d[:, 2:] = np.clip(d[:, 2:], -4.0, 4.0)
    pw, ph = proposals[:, 2] - proposals[:, 0], proposals[:, 3] - proposals[:, 1]
    px, py = proposals[:, 0] + 0.5 * pw, proposals[:, 1] + 0.5 * ph
    cx, cy = px + d[:, 0] * pw, py + d[:, 1] * ph
    w, h = pw * np.exp(d[:, 2]), ph * np.exp(d[:, 3])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip_hw is not None:
        out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, clip_hw[1])
        out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, clip_hw[0])
    return out


def soft_nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5, mode: str = "linear",
             sigma: float = 0.5, score_floor: float = 0.001):
    """Soft-NMS. Returns ``(boxes, scores, indices)`` of the survivors in selection order.

    Linear mode multiplies a remaining score by ``1 - IoU`` when its overlap with
    the selected box exceeds ``iou_threshold``; gaussian mode multiplies every
    remaining score by ``exp(-IoU**2 / sigma)``. Scores below ``score_floor``
    are dropped.
    """
    if mode not in ("linear", "gaussian"):
        raise ValueError(f"unknown soft-nms mode {mode!r}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.array(scores, dtype=np.float64).reshape(-1)
    remaining = list(np.nonzero(scores >= score_floor)[0])
    keep, kept_scores = [], []
    while remaining:
        best = max(remaining, key=lambda i: (scores[i], -i))
        remaining.remove(best)
        keep.append(best)
        kept_scores.append(scores[best])
        if not remaining:
            break
        rest = np.array(remaining)
        ious = box_iou(boxes[best], boxes[rest])[0]
        if mode == "linear":
            decay = np.where(ious > iou_threshold, 1.0 - ious, 1.0)
        else:
            decay = np.exp(-(ious * ious) / sigma)
        scores[rest] = scores[rest] * decay
        remaining = [i for i in remaining if scores[i] >= score_floor]
    idx = np.array(keep, dtype=int)
    return boxes[idx], np.array(kept_scores), idx
