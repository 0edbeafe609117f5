"""Deterministic toy training loop."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from ..optim import SGD
from .detector import ToyDetector, forward_detector
from .losses import assign_targets, compute_losses, sample_proposals
from .scenes import generate_scene

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "cls_loss", "box_loss", "mask_loss", "total")
TRAIN_SEED_STRIDE = 1_000_003
EVAL_SEED_BASE = 10**9


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainResult:
    model: ToyDetector
    log: list[dict] = field(default_factory=list)

    def totals(self) -> np.ndarray:
        return np.array([row["total"] for row in self.log])

    def initial_loss(self) -> float:
        return float(self.log[0]["total"])

    def final_loss(self, window: int = 20) -> float:
        """Mean total loss over the last ``window`` iterations."""
        return float(self.totals()[-window:].mean())


def train_scene_seed(seed: int, iteration: int, index: int, batch: int) -> int:
    return seed * TRAIN_SEED_STRIDE + iteration * batch + index


def make_batch(cfg: dict, seed: int, iteration: int):
    t = cfg["train"]
    size = cfg["model"]["image_size"]
    scenes = [
        generate_scene(train_scene_seed(seed, iteration, b, t["batch_size"]), size, cfg["model"]["num_classes"])
        for b in range(t["batch_size"])
    ]
    rng = np.random.default_rng([seed, iteration])
    proposals = sample_proposals(scenes, rng, t["jitter"], t["proposals_per_gt"], t["negatives_per_image"], size)
    return scenes, proposals


def train_step(model: ToyDetector, opt: SGD, scenes, proposals) -> dict[str, float]:
    cfg = model.config
    images = np.stack([s.image for s in scenes]).astype(model.dtype)
    targets = assign_targets(scenes, proposals, cfg["hroie"]["mask_size"])
    opt.zero_grad()
    losses = compute_losses(forward_detector(model, images, proposals), targets)
    values = {k: float(v.data) for k, v in losses.items()}
    losses["total"].backward()
    opt.step()
    return values


def train(config: dict, seed: int | None = None, model: ToyDetector | None = None,
          on_step=None) -> TrainResult:
    """Train ``config['train']['iterations']`` steps; same config and seed give identical curves."""
    seed = config["seed"] if seed is None else seed
    model = model if model is not None else ToyDetector(config, seed=seed)
    t = config["train"]
    opt = SGD(model.parameters(), lr=t["lr"], momentum=t["momentum"], weight_decay=t["weight_decay"])
    result = TrainResult(model)
    for it in range(t["iterations"]):
        scenes, proposals = make_batch(config, seed, it)
        values = train_step(model, opt, scenes, proposals)
        if not np.isfinite(values["total"]):
            raise TrainingDiverged(it, values["total"])
        row = {"iteration": it, **values}
        result.log.append(row)
        if on_step is not None:
            on_step(row)
        if it % 20 == 0 or it == t["iterations"] - 1:
            log.info("iter %d total %.4f (cls %.4f box %.4f mask %.4f)", it, values["total"],
                     values["cls_loss"], values["box_loss"], values["mask_loss"])
    return result


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for row in rows:
        writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
    return buf.getvalue()
