"""Synthetic blob scenes with exact instance masks.

Class 1 is an axis-aligned rectangle, class 2 an ellipse, class 3 a diamond.
Each class has its own base colour with per-instance jitter, drawn on a
smooth textured background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = {1: "rectangle", 2: "ellipse", 3: "diamond"}
_BASE_COLORS = {1: (0.9, 0.25, 0.2), 2: (0.2, 0.8, 0.3), 3: (0.25, 0.35, 0.9)}


@dataclass
class Instance:
    category: int
    box: np.ndarray  # x1, y1, x2, y2 in pixels, x2/y2 exclusive
    mask: np.ndarray  # H×W bool


@dataclass
class Scene:
    image: np.ndarray  # 3×H×W
    instances: list[Instance]

    @property
    def boxes(self) -> np.ndarray:
        return np.array([i.box for i in self.instances], dtype=np.float64).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.array([i.category for i in self.instances], dtype=int)


def shape_mask(category: int, x1: int, y1: int, w: int, h: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = x1 + w / 2.0, y1 + h / 2.0
    dx, dy = (xx - cx) / (w / 2.0), (yy - cy) / (h / 2.0)
    if category == 1:
        return (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    if category == 2:
        return dx * dx + dy * dy <= 1
    if category == 3:
        return np.abs(dx) + np.abs(dy) <= 1
    raise ValueError(f"no shape for category {category}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.full((3, size, size), 0.45)
    for _ in range(4):
        fx, fy = rng.uniform(1, 6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.06, size=3)[:, None, None]
        img += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[None]
    img += rng.normal(0, 0.03, size=img.shape)
    return img


def generate_scene(seed: int, size: int = 128, num_classes: int = 3, max_instances: int = 5,
                   min_side: int = 12, max_side: int = 40) -> Scene:
    """Deterministic scene with 1..max_instances non-overlapping objects."""
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in 1..{len(SHAPES)}")
    rng = np.random.default_rng(seed)
    image = _background(rng, size)
    target = int(rng.integers(1, max_instances + 1))
    placed: list[Instance] = []
    occupied = np.zeros((size, size), dtype=bool)
    for _ in range(50 * target):
        if len(placed) == target:
            break
        cat = int(rng.integers(1, num_classes + 1))
        w, h = (int(v) for v in rng.integers(min_side, max_side + 1, size=2))
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        # keep a 2-pixel gap between objects
        if occupied[max(y1 - 2, 0): y1 + h + 2, max(x1 - 2, 0): x1 + w + 2].any():
            continue
        mask = shape_mask(cat, x1, y1, w, h, size)
        ys, xs = np.nonzero(mask)
        if len(ys) < 16:
            continue
        occupied[y1: y1 + h, x1: x1 + w] = True
        color = np.clip(np.array(_BASE_COLORS[cat]) + rng.uniform(-0.1, 0.1, size=3), 0, 1)
        image[:, mask] = color[:, None] + rng.normal(0, 0.02, size=(3, int(mask.sum())))
        box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)
        placed.append(Instance(cat, box, mask))
    return Scene(image.astype(np.float64), placed)


def fill_ratio(mask: np.ndarray, box: np.ndarray) -> float:
    x1, y1, x2, y2 = (int(v) for v in box)
    return float(mask.sum()) / float((x2 - x1) * (y2 - y1))
