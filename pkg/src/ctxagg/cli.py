"""Command-line entry point: ``ctxagg <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from . import config as config_mod
from .accounting import DEFAULT_PROPOSALS, count_macs, count_params, reconcile
from .densefpn import DenseFPN, DenseFPNConfig
from .gradsuite import TOLERANCE, run_suite
from .hroie import HRoIE, HRoIEConfig
from .scp import SCP, SCPConfig

log = logging.getLogger("ctxagg")


class CLIError(Exception):
    pass


# -- output plumbing ----------------------------------------------------------
class Staging:
    """Collects output files in a temp dir and moves them into place only on success."""

    def __init__(self, out: str | None):
        self.out = out
        self.dir = None

    def __enter__(self):
        if self.out is not None:
            parent = os.path.dirname(os.path.abspath(self.out)) or "."
            os.makedirs(parent, exist_ok=True)
            self.dir = tempfile.mkdtemp(prefix=".ctxagg-", dir=parent)
        return self

    def path(self, name: str) -> str | None:
        return None if self.dir is None else os.path.join(self.dir, name)

    def write_text(self, name: str, text: str):
        if self.dir is not None:
            with open(self.path(name), "w", newline="") as fh:
                fh.write(text)

    def write_bytes(self, name: str, data: bytes):
        if self.dir is not None:
            with open(self.path(name), "wb") as fh:
                fh.write(data)

    def __exit__(self, exc_type, exc, tb):
        if self.dir is None:
            return False
        try:
            if exc_type is None:
                os.makedirs(self.out, exist_ok=True)
                for name in sorted(os.listdir(self.dir)):
                    os.replace(os.path.join(self.dir, name), os.path.join(self.out, name))
        finally:
            shutil.rmtree(self.dir, ignore_errors=True)
        return False


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def table(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[k]) for r in cells) for k in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def pgm(values: np.ndarray) -> bytes:
    """16-bit binary PGM of a 2-D array, min-max scaled to 0..65535."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    px = np.round(scaled * 65535).astype(">u2")
    h, w = v.shape
    return f"P5\n{w} {h}\n65535\n".encode() + px.tobytes()


def _load_config(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if args.seed is not None:
        overrides["seed"] = args.seed
    return config_mod.load(args.config, overrides)


# -- subcommands --------------------------------------------------------------
def cmd_gradcheck(args, stage: Staging) -> int:
    errors = run_suite(args.seed or 0)
    rows = [(name, f"{err:.3e}", "pass" if err < TOLERANCE else "FAIL") for name, err in errors.items()]
    print(table(("case", "max_rel_error", "status"), rows))
    ok = all(err < TOLERANCE for err in errors.values())
    print(f"\n{sum(e < TOLERANCE for e in errors.values())}/{len(errors)} below {TOLERANCE:g}")
    stage.write_text("gradcheck.csv", to_csv(("case", "max_rel_error"), [(k, repr(v)) for k, v in errors.items()]))
    stage.write_text("gradcheck.json", dumps_json({"tolerance": TOLERANCE, "errors": errors, "pass": ok}))
    return 0 if ok else 1


def _build_module(args):
    c = args.channels
    if args.module == "hroie":
        levels = tuple(range(2, 2 + (args.levels or 4)))
        return HRoIE(HRoIEConfig(channels=c, levels=levels)).assign_names()
    if args.module == "scp":
        levels = tuple(range(2, 2 + (args.levels or 5)))
        return SCP(SCPConfig(channels=c, levels=levels, reduction=args.reduction)).assign_names()
    if args.module == "densefpn":
        n = args.levels or 5
        cfg = DenseFPNConfig(depth=args.depth, channels=c, mid_channels=args.mid_channels, levels=(2, 1 + n))
        return DenseFPN(cfg).assign_names()
    raise CLIError(f"unknown module {args.module!r}")


def cmd_params(args, stage: Staging) -> int:
    if args.module == "toy":
        from .toy.detector import ToyDetector
        model = ToyDetector(_load_config(args))
        rep = count_params(model, "toy")
        parts = {k: count_params(v, k).params for k, v in vars(model).items()
                 if not k.startswith("_") and v is not None and hasattr(v, "parameters")}
        rep.breakdown = parts
    else:
        model = _build_module(args)
        rep = count_params(model, args.module)
    rows = [("params", f"{rep.params:,}"), ("weights", f"{rep.weights:,}"), ("biases", f"{rep.biases:,}"),
            ("norm_affine", f"{rep.norm_affine:,}"), ("reweight", f"{rep.reweight:,}")]
    rows += [(f"  {k}", f"{v:,}") for k, v in rep.breakdown.items()]
    print(table((rep.module, "count"), rows))
    stage.write_text("params.json", dumps_json(rep.to_dict()))
    return 0


def cmd_flops(args, stage: Staging) -> int:
    hw = (args.input_size, args.input_size)
    reports = [
        count_macs(DenseFPN(DenseFPNConfig(depth=1, channels=256, mid_channels=args.mid_channels)), hw),
        count_macs(SCP(SCPConfig(channels=256)), hw),
        count_macs(HRoIE(HRoIEConfig(channels=256)), hw, args.det_rois, args.mask_rois),
    ]
    for rep, name in zip(reports, ("densefpn_block", "scp", "hroie")):
        rep.module = name
    print(table(("module", "params", "MACs", "2xMACs"),
                [(r.module, f"{r.params:,}", f"{r.macs:,}", f"{r.flops:,}") for r in reports]))
    rows = reconcile(args.det_rois, args.mask_rois, args.mid_channels)
    print()
    print(table(("item", "computed", "reference", "rel_err", "tol", "status"),
                [(r["item"], f"{r['ours']:,}", f"{r['reference']:,.0f}", f"{r['rel_error']:.3f}", r["tolerance"],
                  ("pass" if r["pass"] else "FAIL") if r["gating"] else ("ok" if r["pass"] else "-"))
                 for r in rows]))
    scp_ok = [r["item"] for r in rows if r["item"].startswith("scp.flops") and r["pass"]]
    print(f"\nSCP FLOP delta matches under: {', '.join(scp_ok) or 'neither convention'}")
    gating_ok = all(r["pass"] for r in rows if r["gating"])
    fields = ("item", "ours", "reference", "rel_error", "tolerance", "pass", "gating", "note")
    stage.write_text("reconciliation.csv", to_csv(fields, [[r[f] for f in fields] for r in rows]))
    stage.write_text("flops.json", dumps_json({"input_hw": list(hw), "reports": [r.to_dict() for r in reports],
                                               "reconciliation": rows, "scp_convention": scp_ok}))
    if stage.dir is not None:
        from .plotting import reconciliation
        reconciliation(rows, stage.path("reconciliation.png"))
    return 0 if gating_ok else 1


def cmd_train(args, stage: Staging) -> int:
    from .checkpoint import save_checkpoint
    from .toy.train import metrics_csv, train

    cfg = _load_config(args)
    stage.write_text("config.json", config_mod.dumps(cfg))
    t0 = time.process_time()
    result = train(cfg)
    cpu = time.process_time() - t0
    summary = {"iterations": len(result.log), "seed": cfg["seed"]}
    if result.log:
        summary.update({"initial_loss": result.initial_loss(), "final_loss": result.final_loss(),
                        "ratio": result.final_loss() / result.initial_loss()})
        print(f"initial loss {summary['initial_loss']:.4f}  final loss {summary['final_loss']:.4f}  "
              f"ratio {summary['ratio']:.3f}")
    print(f"{len(result.log)} iterations in {cpu:.1f}s CPU")
    stage.write_text("metrics.csv", metrics_csv(result.log))
    stage.write_text("summary.json", dumps_json(summary))
    if stage.dir is not None:
        save_checkpoint(stage.path("checkpoint.zip"), result.model, cfg["seed"], cfg)
        if result.log:
            from .plotting import loss_curves
            loss_curves(result.log, stage.path("loss.png"))
    return 0


def _model_from_args(args):
    from .checkpoint import load_checkpoint
    from .toy.detector import ToyDetector

    if args.checkpoint:
        _, manifest = load_checkpoint(args.checkpoint)
        cfg = config_mod.resolve(manifest.get("config") or {})
        if args.seed is not None:
            cfg["seed"] = args.seed
        model = ToyDetector(cfg)
        load_checkpoint(args.checkpoint, model)
        return model, cfg
    cfg = _load_config(args)
    return ToyDetector(cfg), cfg


def cmd_eval(args, stage: Staging) -> int:
    from .toy.evaluate import evaluate

    model, cfg = _model_from_args(args)
    stage.write_text("config.json", config_mod.dumps(cfg))
    metrics = evaluate(model, args.n_scenes, args.proposals, args.jitter, cfg["seed"])
    print(table(("metric", "value"), [(k, f"{v:.4f}" if isinstance(v, float) else v) for k, v in metrics.items()]))
    stage.write_text("eval.json", dumps_json(metrics))
    return 0


def cmd_dump_maps(args, stage: Staging) -> int:
    from .scp import cablock_trace
    from .tensor import no_grad
    from .toy.scenes import generate_scene

    model, cfg = _model_from_args(args)
    stage.write_text("config.json", config_mod.dumps(cfg))
    scene = generate_scene(args.scene_seed, cfg["model"]["image_size"], cfg["model"]["num_classes"])
    stage.write_bytes("image.pgm", pgm(scene.image.mean(axis=0)))
    panels = {}
    with no_grad():
        pyr = model.neck(scene.image[None])
        if model.scp is not None:
            for key, block in model.scp.blocks.items():
                tr = cablock_trace(pyr[int(key)], block)
                h, w = pyr[int(key)].shape[2:]
                for name, arr in (("gate", tr["gate"].data[0, 0]), ("attention", tr["alpha"].data[0, 0].reshape(h, w))):
                    stage.write_bytes(f"scp_{name}_P{key}.pgm", pgm(arr))
                    stage.write_text(f"scp_{name}_P{key}.csv",
                                     to_csv([f"x{j}" for j in range(w)], [[repr(float(v)) for v in row] for row in arr]))
                    panels[f"{name} P{key}"] = arr
            pyr = model.scp(pyr)
        gate_rows, means = [], {}
        if isinstance(model.extractor, HRoIE) and len(scene.boxes):
            rois = np.concatenate([np.zeros((len(scene.boxes), 1)), scene.boxes.astype(np.float64)], axis=1)
            for task in ("detection", "mask"):
                gates = {}
                model.extractor(pyr, rois, task, gates=gates)
                means[task] = [float(gates[i].mean()) for i in model.extractor.cfg.levels]
                for k, i in enumerate(sorted(gates, reverse=task == "mask")):
                    gate_rows.append((task, f"P{i}", k, repr(float(gates[i].mean()))))
    stage.write_text("hroie_gate_means.csv", to_csv(("task", "level", "step", "mean_gate"), gate_rows))
    if gate_rows:
        print(table(("task", "level", "step", "mean_gate"), [r[:3] + (f"{float(r[3]):.4f}",) for r in gate_rows]))
    print(f"wrote {len(panels)} SCP maps for scene {args.scene_seed}")
    if stage.dir is not None:
        from .plotting import gate_means, map_panels
        if panels:
            map_panels(panels, stage.path("scp_maps.png"), f"scene {args.scene_seed}")
        if means:
            gate_means(list(model.extractor.cfg.levels), means, stage.path("hroie_gate_means.png"))
    return 0


def cmd_selftest(args, stage: Staging) -> int:
    from .selftest import run

    outcomes = run()
    print(table(("check", "status", "detail"), [(o.name, "pass" if o.ok else "FAIL", o.detail) for o in outcomes]))
    n_ok = sum(o.ok for o in outcomes)
    print(f"\n{n_ok}/{len(outcomes)} checks passed")
    stage.write_text("selftest.json", dumps_json([o.__dict__ for o in outcomes]))
    return 0 if n_ok == len(outcomes) else 1


# -- parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="directory for CSV/JSON/PGM/PNG outputs")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.iterations=50 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ctxagg", description="Context aggregation modules: checks, accounting and toy runs.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")

    pp = sub.add_parser("params", parents=[common], help="learnable parameter counts")
    pp.add_argument("--module", choices=("hroie", "scp", "densefpn", "toy"), required=True)
    pp.add_argument("--channels", type=int, default=256)
    pp.add_argument("--levels", type=int, help="number of pyramid levels, starting at P2")
    pp.add_argument("--depth", type=int, default=1, help="DenseFPN blocks")
    pp.add_argument("--mid-channels", type=int, default=192, help="DenseFPN bottleneck width")
    pp.add_argument("--reduction", type=int, default=1, help="SCP refinement reduction ratio")

    pf = sub.add_parser("flops", parents=[common], help="MAC counts and reconciliation with the reference ablation")
    pf.add_argument("--input-size", type=int, default=512)
    pf.add_argument("--det-rois", type=int, default=DEFAULT_PROPOSALS)
    pf.add_argument("--mask-rois", type=int, default=DEFAULT_PROPOSALS)
    pf.add_argument("--mid-channels", type=int, default=192)

    sub.add_parser("train", parents=[common], help="train the toy detector")

    for name, text in (("eval", "evaluate on held-out toy scenes"), ("dump-maps", "export SCP and HRoIE gate maps")):
        pe = sub.add_parser(name, parents=[common], help=text)
        pe.add_argument("--checkpoint", metavar="PATH", help="checkpoint from `train`; default is a fresh init")
        if name == "eval":
            pe.add_argument("--n-scenes", type=int)
            pe.add_argument("--proposals", choices=("grid", "gt"), default="grid")
            pe.add_argument("--jitter", type=float, default=0.0, help="edge jitter for --proposals gt")
        else:
            pe.add_argument("--scene-seed", type=int, default=1_000_000_000)

    sub.add_parser("selftest", parents=[common], help="worked-example checks")
    return p


COMMANDS = {
    "gradcheck": cmd_gradcheck, "params": cmd_params, "flops": cmd_flops, "train": cmd_train,
    "eval": cmd_eval, "dump-maps": cmd_dump_maps, "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with Staging(args.out) as stage:
            if args.command not in ("params", "flops", "gradcheck", "selftest") or args.config or args.set:
                # validate config early so bad keys fail before any work
                cfg = _load_config(args)
                if args.command in ("params", "flops", "gradcheck", "selftest"):
                    stage.write_text("config.json", config_mod.dumps(cfg))
            # a failing check still writes its report; only errors discard the staging dir
            return COMMANDS[args.command](args, stage)
    except (CLIError, config_mod.ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"ctxagg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
