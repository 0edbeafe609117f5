import json
import subprocess
import sys

import numpy as np
import pytest

from ctxagg.cli import main, pgm

TINY = ["--set", "model.image_size=64", "--set", "model.backbone_channels=[8,8,12,12]",
        "--set", "model.head_hidden=16", "--set", "densefpn.channels=8", "--set", "densefpn.mid_channels=4",
        "--set", "train.batch_size=1"]


def test_params_hroie(capsys, tmp_path):
    assert main(["params", "--module", "hroie", "--out", str(tmp_path)]) == 0
    assert "1048576" in capsys.readouterr().out.replace(",", "")
    rep = json.loads((tmp_path / "params.json").read_text())
    assert rep["params"] == 1_050_624


def test_flops_writes_reconciliation(tmp_path):
    assert main(["flops", "--out", str(tmp_path)]) == 0
    assert {p.name for p in tmp_path.iterdir()} >= {"reconciliation.csv", "flops.json", "reconciliation.png"}
    assert "scp.flops[macs]" in (tmp_path / "reconciliation.csv").read_text()


def test_selftest_and_gradcheck(tmp_path):
    assert main(["selftest", "--out", str(tmp_path / "s")]) == 0
    assert all(o["ok"] for o in json.loads((tmp_path / "s" / "selftest.json").read_text()))
    assert main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "gradcheck.csv").read_text().startswith("case,")


@pytest.mark.parametrize("argv", [
    ["train", "--set", "densefpn.dpeth=2"],
    ["train", "--set", "train.iterations=bad"],
    ["train", "--set", "nokeyvalue"],
    ["eval", "--checkpoint", "does/not/exist.zip"],
])
def test_errors_exit_2_without_outputs(tmp_path, capsys, argv):
    out = tmp_path / "run"
    assert main(argv + ["--out", str(out)]) == 2
    assert "error" in capsys.readouterr().err
    assert not out.exists() and list(tmp_path.iterdir()) == []


def test_train_eval_dump_maps_end_to_end(tmp_path):
    run = tmp_path / "run"
    assert main(["train", *TINY, "--set", "train.iterations=3", "--out", str(run)]) == 0
    names = {p.name for p in run.iterdir()}
    assert names == {"config.json", "metrics.csv", "summary.json", "checkpoint.zip", "loss.png"}
    ck = str(run / "checkpoint.zip")
    assert main(["eval", "--checkpoint", ck, "--n-scenes", "2", "--out", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev" / "eval.json").read_text())["n_scenes"] == 2
    assert main(["dump-maps", "--checkpoint", ck, "--out", str(tmp_path / "maps")]) == 0
    maps = {p.name for p in (tmp_path / "maps").iterdir()}
    assert {"image.pgm", "scp_gate_P2.pgm", "scp_attention_P6.csv", "hroie_gate_means.csv", "scp_maps.png"} <= maps
    again = tmp_path / "run2"
    assert main(["train", *TINY, "--set", "train.iterations=3", "--out", str(again)]) == 0
    for name in names:
        assert (run / name).read_bytes() == (again / name).read_bytes(), name


def test_pgm_header_and_scaling():
    data = pgm(np.array([[0.0, 1.0], [0.5, 1.0]]))
    header = b"P5\n2 2\n65535\n"
    assert data.startswith(header)
    px = np.frombuffer(data[len(header):], dtype=">u2")
    np.testing.assert_array_equal(px, [0, 65535, 32768, 65535])


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ctxagg", "params", "--module", "scp"], capture_output=True, text=True)
    assert r.returncode == 0 and "660490" in r.stdout.replace(",", "")
