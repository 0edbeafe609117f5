"""Flat array archive: raw little-endian scalars per path plus a JSON manifest.

The archive is a zip file with a ``manifest.json`` entry and one entry per
array named by its path. Entry timestamps are pinned so that saving the same
arrays twice produces byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from collections import OrderedDict
from typing import Mapping

import numpy as np

from .pyramid import LATERAL_LAYOUT

FORMAT = "ctxagg-archive/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _le_dtype(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def save_arrays(path: str, arrays: Mapping[str, np.ndarray], meta: dict | None = None):
    """Write ``arrays`` to ``path`` atomically."""
    entries = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        entries.append({"path": name, "shape": list(arr.shape), "dtype": _le_dtype(arr.dtype).str})
    manifest = {"format": FORMAT, **(meta or {}), "arrays": entries}
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
            zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
            for name, arr in arrays.items():
                arr = np.ascontiguousarray(arr, dtype=_le_dtype(np.asarray(arr).dtype))
                zf.writestr(zipfile.ZipInfo(name, date_time=_EPOCH), arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_arrays(path: str) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Inverse of :func:`save_arrays`; returns ``(arrays, manifest)``."""
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path}: unsupported archive format {manifest.get('format')!r}")
        for entry in manifest["arrays"]:
            raw = zf.read(entry["path"])
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            out[entry["path"]] = arr.astype(arr.dtype.newbyteorder("="))
    return out, manifest


def save_checkpoint(path: str, model, seed: int | None = None, config: dict | None = None):
    state = model.state_dict()
    precision = str(next(iter(state.values())).dtype) if state else "float64"
    save_arrays(path, state, {"kind": "checkpoint", "precision": precision, "seed": seed,
                              "config": config or {}, "lateral": LATERAL_LAYOUT})


def load_checkpoint(path: str, model=None):
    """Load arrays; if ``model`` is given its parameters are overwritten in place."""
    arrays, manifest = load_arrays(path)
    if model is not None:
        model.load_state_dict(arrays)
    return arrays, manifest


def save_pyramid(path: str, pyramid, meta: dict | None = None):
    arrays = OrderedDict((f"pyramid/l{i}", t.data) for i, t in pyramid.levels.items())
    save_arrays(path, arrays, {"kind": "pyramid", **(meta or {})})
