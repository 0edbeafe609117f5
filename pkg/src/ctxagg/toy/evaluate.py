"""Inference on held-out scenes: grid proposals, Soft-NMS, mask pasting and IoU metrics."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..tensor import no_grad, softmax, _sigmoid
from .boxes import box_iou, decode, soft_nms
from .detector import ToyDetector
from .losses import jitter_boxes
from .scenes import Scene, generate_scene

EVAL_SEED_BASE = 10**9


@dataclass
class Predictions:
    boxes: np.ndarray  # k×4
    labels: np.ndarray  # k
    scores: np.ndarray  # k
    masks: np.ndarray  # k×H×W bool


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("CTXAGG_THREADS", "1")))
    except ValueError:
        return 1


def eval_scenes(cfg: dict, n_scenes: int) -> list[Scene]:
    size = cfg["model"]["image_size"]
    return [generate_scene(EVAL_SEED_BASE + i, size, cfg["model"]["num_classes"]) for i in range(n_scenes)]


def grid_proposals(size: int, sizes, aspects, stride: int) -> np.ndarray:
    """Boxes of every (size, aspect) centred on a regular grid, clipped to the image."""
    centers = np.arange(stride / 2, size, stride)
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    cx, cy = cx.ravel(), cy.ravel()
    out = []
    for s in sizes:
        for a in aspects:
            # aspect is h / w at constant area
            w, h = s / np.sqrt(a), s * np.sqrt(a)
            out.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1))
    boxes = np.clip(np.concatenate(out), 0, size)
    ok = (boxes[:, 2] - boxes[:, 0] >= 4) & (boxes[:, 3] - boxes[:, 1] >= 4)
    return boxes[ok]


def paste_mask(prob: np.ndarray, box: np.ndarray, size: int, threshold: float = 0.5) -> np.ndarray:
    """Bilinearly resample an S×S probability map into ``box`` on a size×size canvas."""
    s = prob.shape[0]
    x1, y1, x2, y2 = box
    out = np.zeros((size, size), dtype=bool)
    c0, c1 = int(np.floor(x1)), int(np.ceil(x2))
    r0, r1 = int(np.floor(y1)), int(np.ceil(y2))
    c0, r0, c1, r1 = max(c0, 0), max(r0, 0), min(c1, size), min(r1, size)
    if c1 <= c0 or r1 <= r0:
        return out

    def weights(lo, hi, start, stop):
        # pixel centres in the S-cell grid of the box
        u = (np.arange(start, stop) + 0.5 - lo) / max(hi - lo, 1e-9) * s - 0.5
        u = np.clip(u, 0, s - 1)
        i0 = np.floor(u).astype(int)
        i1 = np.minimum(i0 + 1, s - 1)
        f = u - i0
        m = np.zeros((stop - start, s))
        np.add.at(m, (np.arange(stop - start), i0), 1 - f)
        np.add.at(m, (np.arange(stop - start), i1), f)
        return m

    inside_x = (np.arange(c0, c1) + 0.5 >= x1) & (np.arange(c0, c1) + 0.5 < x2)
    inside_y = (np.arange(r0, r1) + 0.5 >= y1) & (np.arange(r0, r1) + 0.5 < y2)
    crop = weights(y1, y2, r0, r1) @ prob @ weights(x1, x2, c0, c1).T
    out[r0:r1, c0:c1] = (crop >= threshold) & inside_y[:, None] & inside_x[None, :]
    return out


def scene_proposals(scene: Scene, cfg: dict, mode: str = "grid", jitter: float = 0.0,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    size = cfg["model"]["image_size"]
    if mode == "grid":
        e = cfg["eval"]
        return grid_proposals(size, e["grid_sizes"], e["grid_aspects"], e["grid_stride"])
    if mode == "gt":
        if jitter == 0 or len(scene.boxes) == 0:
            return scene.boxes.astype(np.float64).reshape(-1, 4)
        return jitter_boxes(scene.boxes, rng, jitter, size)
    raise ValueError(f"unknown proposal mode {mode!r}")


def predict(model: ToyDetector, scene: Scene, boxes: np.ndarray) -> Predictions:
    """Score proposals, decode boxes, run class-wise Soft-NMS and paste masks."""
    cfg = model.config
    e = cfg["eval"]
    size = cfg["model"]["image_size"]
    empty = Predictions(np.zeros((0, 4)), np.zeros(0, int), np.zeros(0), np.zeros((0, size, size), bool))
    if len(boxes) == 0:
        return empty
    rois = np.concatenate([np.zeros((len(boxes), 1)), boxes], axis=1)
    with no_grad():
        pyr = model.features(scene.image[None].astype(model.dtype))
        cls, deltas = model.detect(pyr, rois)
        prob = softmax(cls, axis=1).data
        fg = prob[:, 1:]
        labels = fg.argmax(axis=1) + 1
        scores = fg.max(axis=1)
        decoded = decode(boxes, deltas.data.astype(np.float64), (size, size))
        keep_boxes, keep_labels, keep_scores = [], [], []
        for k in range(1, model.num_classes + 1):
            sel = np.nonzero((labels == k) & (scores >= e["score_threshold"]))[0]
            if len(sel) == 0:
                continue
            b, s, _ = soft_nms(decoded[sel], scores[sel], e["soft_nms_iou"], e["soft_nms_mode"],
                               e["soft_nms_sigma"], e["score_floor"])
            ok = s >= e["score_threshold"]
            keep_boxes.append(b[ok])
            keep_scores.append(s[ok])
            keep_labels.append(np.full(int(ok.sum()), k))
        if not keep_boxes:
            return empty
        b = np.concatenate(keep_boxes)
        s = np.concatenate(keep_scores)
        lab = np.concatenate(keep_labels)
        order = np.argsort(-s, kind="stable")[: e["max_detections"]]
        b, s, lab = b[order], s[order], lab[order]
        valid = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
        b, s, lab = b[valid], s[valid], lab[valid]
        if len(b) == 0:
            return empty
        mrois = np.concatenate([np.zeros((len(b), 1)), b], axis=1)
        mprob = _sigmoid(model.segment(pyr, mrois).data.astype(np.float64))
    masks = np.stack([paste_mask(mprob[i], b[i], size) for i in range(len(b))])
    return Predictions(b, lab, s, masks)


def match_scene(scene: Scene, pred: Predictions, iou_threshold: float = 0.5) -> tuple[int, list[float]]:
    """Recalled-GT count and per-GT mask IoU for one scene.

    A ground-truth instance is recalled when some same-class prediction overlaps
    it with box IoU >= ``iou_threshold``; its mask IoU is taken from the
    highest-scoring such prediction. Unrecalled instances score mask IoU 0.
    """
    hits, ious = 0, []
    for inst in scene.instances:
        cand = np.nonzero(pred.labels == inst.category)[0]
        if len(cand):
            ov = box_iou(inst.box[None].astype(np.float64), pred.boxes[cand])[0]
            cand = cand[ov >= iou_threshold]
        if len(cand) == 0:
            ious.append(0.0)
            continue
        hits += 1
        best = cand[np.argmax(pred.scores[cand])]
        m = pred.masks[best]
        inter = np.logical_and(m, inst.mask).sum()
        union = np.logical_or(m, inst.mask).sum()
        ious.append(float(inter / union) if union else 0.0)
    return hits, ious


def evaluate_predictions(scenes: list[Scene], predictions: list[Predictions]) -> dict:
    hits, ious, n_pred = 0, [], 0
    for scene, pred in zip(scenes, predictions, strict=True):
        h, iou = match_scene(scene, pred)
        hits += h
        ious.extend(iou)
        n_pred += len(pred.scores)
    n_gt = len(ious)
    return {
        "recall": hits / n_gt if n_gt else 0.0,
        "mask_iou": float(np.mean(ious)) if n_gt else 0.0,
        "n_gt": n_gt,
        "n_pred": n_pred,
    }


def oracle_predictions(scene: Scene) -> Predictions:
    """Ground truth re-expressed as predictions with score 1."""
    n = len(scene.instances)
    size = scene.image.shape[1]
    return Predictions(
        scene.boxes.astype(np.float64).reshape(-1, 4),
        scene.labels.astype(int),
        np.ones(n),
        np.stack([i.mask for i in scene.instances]) if n else np.zeros((0, size, size), bool),
    )


def evaluate(model: ToyDetector, n_scenes: int | None = None, proposals: str = "grid",
             jitter: float = 0.0, seed: int = 0) -> dict:
    """Recall at IoU 0.5 and mean mask IoU over a fixed held-out scene range."""
    cfg = model.config
    n_scenes = cfg["eval"]["n_scenes"] if n_scenes is None else n_scenes
    scenes = eval_scenes(cfg, n_scenes)

    def run(i):
        rng = np.random.default_rng([seed, i])
        return predict(model, scenes[i], scene_proposals(scenes[i], cfg, proposals, jitter, rng))

    workers = thread_count()
    with no_grad():
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                preds = list(pool.map(run, range(n_scenes)))
        else:
            preds = [run(i) for i in range(n_scenes)]
    out = evaluate_predictions(scenes, preds)
    out.update({"n_scenes": n_scenes, "proposals": proposals, "jitter": jitter})
    return out
