"""Run configuration: nested JSON with strict key checking."""

from __future__ import annotations

import copy
import json
from typing import Any

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "precision": "float64",
    "model": {
        "image_size": 128,
        "num_classes": 3,
        "backbone_channels": [16, 32, 48, 64],
        "head_hidden": 128,
        "canonical_scale": 56.0,
    },
    "densefpn": {
        "enabled": True,
        "depth": 2,
        "channels": 64,
        "mid_channels": 32,
        "levels": [2, 6],
    },
    "scp": {
        "enabled": True,
        "levels": [2, 3, 4, 5, 6],
        "reduction": 1,
    },
    "hroie": {
        "enabled": True,
        "levels": [2, 3, 4, 5],
        "det_size": 7,
        "mask_size": 14,
        "sampling_ratio": 2,
    },
    "train": {
        "iterations": 200,
        "batch_size": 2,
        "lr": 0.002,
        "momentum": 0.9,
        "weight_decay": 0.0001,
        "jitter": 0.1,
        "proposals_per_gt": 4,
        "negatives_per_image": 8,
    },
    "eval": {
        "n_scenes": 20,
        "grid_sizes": [16, 28, 44],
        "grid_aspects": [0.5, 1.0, 2.0],
        "grid_stride": 8,
        "score_threshold": 0.5,
        "soft_nms_iou": 0.5,
        "soft_nms_mode": "linear",
        "soft_nms_sigma": 0.5,
        "score_floor": 0.001,
        "max_detections": 20,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = _typed(base[key], value, where)
    return out


def _typed(default, value, where: str):
    """Coerce ``value`` to the kind of ``default`` or raise."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {where!r} expects {type(default).__name__}, got {value!r}")
    return value


def resolve(overrides: dict | None = None, base: dict | None = None) -> dict:
    """Defaults overlaid with ``overrides``; unknown keys raise :class:`ConfigError`.

    Dotted keys such as ``"densefpn.depth"`` are accepted at the top level.
    """
    nested: dict = {}
    for key, value in (overrides or {}).items():
        parts = key.split(".")
        node = nested
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if parts[-1] in node and isinstance(node[parts[-1]], dict) and isinstance(value, dict):
            node[parts[-1]].update(value)
        else:
            node[parts[-1]] = value
    cfg = _merge(base or DEFAULTS, nested)
    if cfg["precision"] not in ("float64", "float32"):
        raise ConfigError(f"precision must be float64 or float32, got {cfg['precision']!r}")
    return cfg


def load(path: str | None, overrides: dict | None = None) -> dict:
    raw = {}
    if path:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = resolve(raw)
    return resolve(overrides, cfg) if overrides else cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
