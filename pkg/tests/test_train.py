import csv
import io

import numpy as np
import pytest

from ctxagg.checkpoint import load_checkpoint, save_checkpoint
from ctxagg.config import resolve
from ctxagg.toy import train as train_mod
from ctxagg.toy.detector import ToyDetector
from ctxagg.toy.train import LOG_FIELDS, TrainingDiverged, make_batch, metrics_csv, train

SMALL = {"model.image_size": 64, "model.backbone_channels": [8, 8, 12, 12], "model.head_hidden": 16,
         "densefpn.channels": 8, "densefpn.mid_channels": 4, "train.batch_size": 1}


def cfg(**extra):
    return resolve({**SMALL, **extra})


def test_zero_iterations_leaves_initial_weights(tmp_path):
    c = cfg(**{"train.iterations": 0})
    result = train(c)
    assert result.log == []
    save_checkpoint(tmp_path / "a.zip", result.model, 0)
    save_checkpoint(tmp_path / "b.zip", ToyDetector(c), 0)
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()


def test_training_is_deterministic():
    c = cfg(**{"train.iterations": 4})
    a, b = train(c), train(c)
    np.testing.assert_array_equal(a.totals(), b.totals())
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)
    assert not np.array_equal(a.totals(), train(c, seed=1).totals())


def test_batches_are_deterministic():
    c = cfg()
    (s1, p1), (s2, p2) = make_batch(c, 3, 5), make_batch(c, 3, 5)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(s1[0].image, s2[0].image)


def test_divergence_aborts_with_iteration(monkeypatch):
    real = train_mod.train_step
    calls = []

    def step(*args):
        calls.append(1)
        values = real(*args)
        if len(calls) == 3:
            values["total"] = float("nan")
        return values

    monkeypatch.setattr(train_mod, "train_step", step)
    with pytest.raises(TrainingDiverged, match="iteration 2") as exc:
        train(cfg(**{"train.iterations": 10}))
    assert exc.value.iteration == 2


def test_metrics_csv_round_trips():
    result = train(cfg(**{"train.iterations": 3}))
    text = metrics_csv(result.log)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert tuple(rows[0]) == LOG_FIELDS and len(rows) == 3
    for row, logged in zip(rows, result.log):
        assert float(row["total"]) == logged["total"]
        parts = float(row["cls_loss"]) + float(row["box_loss"]) + float(row["mask_loss"])
        assert abs(parts - float(row["total"])) < 1e-12


def test_checkpoint_restores_trained_weights(tmp_path):
    c = cfg(**{"train.iterations": 2})
    result = train(c)
    save_checkpoint(tmp_path / "m.zip", result.model, 0, c)
    fresh = ToyDetector(c)
    _, manifest = load_checkpoint(tmp_path / "m.zip", fresh)
    assert manifest["config"] == c
    for (_, p), (_, q) in zip(result.model.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
