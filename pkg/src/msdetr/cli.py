"""Command-line front end: ``python -m msdetr <subcommand> [--field value ...]``.

Every ExperimentConfig field is exposed as ``--field-name``. A ``--config``
TOML file supplies the base values and explicit flags override it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ExperimentConfig


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser, require_seed: bool) -> None:
    p.add_argument("--config", help="TOML config file providing base values")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {bool: _bool, int: int, float: float}.get(type(f.default), str)
        required = require_seed and f.name == "seed"
        p.add_argument(flag, dest=f.name, type=kind, default=None, required=required,
                       help=f"default: {f.default}")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)
                 if getattr(args, f.name, None) is not None}
    return cfg.replace(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msdetr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic train/test splits")
    _add_config_flags(p, require_seed=False)

    p = sub.add_parser("train", help="train one model; writes train_log.csv and checkpoint.bin")
    _add_config_flags(p, require_seed=True)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    _add_config_flags(p, require_seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--branch", choices=("V", "F", "T", "all"), default="F")

    p = sub.add_parser("ablate", help="train every fusion variant per seed and compare")
    _add_config_flags(p, require_seed=True)
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to run (default: --seed only)")

    p = sub.add_parser("dump-points", help="sampling points of the top queries for one test scene")
    _add_config_flags(p, require_seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", type=int, default=0, help="index into the test split")
    p.add_argument("--top-q", type=int, default=3)
    p.add_argument("--weights", choices=("joint", "modal"), default="joint")

    p = sub.add_parser("grad-check", help="run the finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--out-dir", dest="out_dir", default="runs/grad_check")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from . import harness

    if args.command == "grad-check":
        from .gradcheck import run_suite, summarize

        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        results = run_suite(args.seed, args.trials, h=args.step)
        with open(out / "grad_check.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check", "trial", "max_rel_error", "passed"])
            for r in results:
                w.writerow([r.name, r.trial, repr(r.error), int(r.passed)])
        summary = summarize(results)
        for name, (worst, ok) in summary.items():
            print(f"{name}: max rel error {worst:.3e} {'PASS' if ok else 'FAIL'}")
        return 0 if all(ok for _, ok in summary.values()) else 1

    cfg = config_from_args(args)
    out = Path(cfg.out_dir)

    if args.command == "gen-data":
        root = harness.gen_data(cfg)
        print(f"wrote {cfg.num_train} train and {cfg.num_test} test scenes under {root}")
    elif args.command == "train":
        result = harness.train(cfg)
        print(f"wrote {result.log_path} and {result.checkpoint_path}")
    elif args.command == "eval":
        results = harness.evaluate(args.checkpoint, cfg, args.branch, out_dir=out)
        with open(out / "metrics.jsonl", "w") as fh:
            for b, r in results.items():
                fh.write(json.dumps({"branch": b, "filter": cfg.eval_filter, **r}) + "\n")
        for b, r in results.items():
            print(f"{b}: MR2 {r['MR2']:.4f} AP {r['AP']:.4f} AP50 {r['AP50']:.4f} AP75 {r['AP75']:.4f}")
    elif args.command == "ablate":
        rows = harness.ablate_fusion(cfg, args.seeds or [cfg.seed])
        for r in rows:
            print(f"{r['strategy']:16s} mbo={r['mbo_enabled']!s:5s} seed={r['seed']!s:5s} MR2 {r['mr2']:.4f}")
    elif args.command == "dump-points":
        model, cfg = harness.load_model(args.checkpoint, cfg)
        scene = harness.load_data(cfg)[1][args.scene]
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"points_{args.weights}.csv"
        rows = harness.dump_points(model, scene, args.top_q, args.weights, path=path)
        print(f"wrote {len(rows)} rows to {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
