"""Proposal sampling, target assignment and the detector losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import functional as F
from ..hroie import roi_align
from ..tensor import Tensor, no_grad
from .boxes import box_iou, encode
from .scenes import Scene


@dataclass
class Targets:
    labels: np.ndarray  # R, 0 = background
    box_targets: np.ndarray  # P×4 for the positive rows
    mask_targets: np.ndarray  # P×S×S binary
    positive: np.ndarray  # indices of positive rows


def jitter_boxes(boxes: np.ndarray, rng: np.random.Generator, jitter: float, size: int) -> np.ndarray:
    """Shift every edge by uniform noise of up to ``jitter`` times the box extent."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    scale = np.stack([w, h, w, h], axis=1)
    out = boxes + rng.uniform(-jitter, jitter, size=boxes.shape) * scale
    out = np.clip(out, 0, size)
    # keep boxes non-degenerate after clipping
    out[:, 2] = np.maximum(out[:, 2], out[:, 0] + 1.0)
    out[:, 3] = np.maximum(out[:, 3], out[:, 1] + 1.0)
    return np.clip(out, 0, size)


def random_negatives(gt: np.ndarray, rng: np.random.Generator, count: int, size: int,
                     max_iou: float = 0.3, min_side: int = 10, max_side: int = 48) -> np.ndarray:
    out = []
    for _ in range(count * 20):
        if len(out) == count:
            break
        w, h = rng.uniform(min_side, max_side, size=2)
        x1, y1 = rng.uniform(0, size - w), rng.uniform(0, size - h)
        b = np.array([[x1, y1, x1 + w, y1 + h]])
        if len(gt) == 0 or box_iou(b, gt).max() < max_iou:
            out.append(b[0])
    return np.array(out, dtype=np.float64).reshape(-1, 4)


def sample_proposals(scenes: list[Scene], rng: np.random.Generator, jitter: float, per_gt: int,
                     negatives: int, size: int) -> np.ndarray:
    """Training proposals: jittered ground truth plus random background boxes."""
    rows = []
    for b, scene in enumerate(scenes):
        gt = scene.boxes
        pos = jitter_boxes(np.repeat(gt, per_gt, axis=0), rng, jitter, size) if len(gt) else np.zeros((0, 4))
        neg = random_negatives(gt, rng, negatives, size)
        boxes = np.concatenate([pos, neg], axis=0)
        rows.append(np.concatenate([np.full((len(boxes), 1), b, dtype=np.float64), boxes], axis=1))
    return np.concatenate(rows, axis=0)


def assign_targets(scenes: list[Scene], proposals: np.ndarray, mask_size: int,
                   iou_threshold: float = 0.5) -> Targets:
    """Label proposals by best-IoU ground truth; build box-delta and mask targets for positives."""
    r = len(proposals)
    labels = np.zeros(r, dtype=int)
    matched = np.full(r, -1)
    for b, scene in enumerate(scenes):
        idx = np.nonzero(proposals[:, 0] == b)[0]
        if len(idx) == 0 or not scene.instances:
            continue
        ious = box_iou(proposals[idx, 1:], scene.boxes)
        best = ious.argmax(axis=1)
        ok = ious[np.arange(len(idx)), best] >= iou_threshold
        labels[idx[ok]] = scene.labels[best[ok]]
        matched[idx[ok]] = best[ok]
    positive = np.nonzero(labels > 0)[0]
    box_t = np.zeros((len(positive), 4))
    mask_t = np.zeros((len(positive), mask_size, mask_size))
    for k, i in enumerate(positive):
        scene = scenes[int(proposals[i, 0])]
        inst = scene.instances[matched[i]]
        box_t[k] = encode(proposals[i : i + 1, 1:], inst.box[None])[0]
        with no_grad():
            m = Tensor(inst.mask[None, None].astype(np.float64))
            crop = roi_align(m, np.r_[0.0, proposals[i, 1:]][None], mask_size, 1.0, 2).data[0, 0]
        mask_t[k] = crop >= 0.5
    return Targets(labels, box_t, mask_t, positive)


def compute_losses(outputs: dict[str, Tensor], targets: Targets) -> dict[str, Tensor]:
    """Cross-entropy, smooth-L1 on positive box deltas, per-pixel BCE on positive masks."""
    cls_loss = F.cross_entropy(outputs["cls_logits"], targets.labels)
    pos = targets.positive
    if len(pos):
        box_loss = F.smooth_l1(outputs["box_deltas"][pos], targets.box_targets)
        mask_loss = F.bce_with_logits(outputs["mask_logits"][pos], targets.mask_targets)
    else:
        box_loss = Tensor(np.zeros((), dtype=cls_loss.dtype))
        mask_loss = Tensor(np.zeros((), dtype=cls_loss.dtype))
    total = cls_loss + box_loss + mask_loss
    return {"cls_loss": cls_loss, "box_loss": box_loss, "mask_loss": mask_loss, "total": total}
