"""Command-line entry point: ``polypdiff {generate-data,train,infer,eval,ablate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import engine
from .data import DatasetError, SyntheticConfig, generate_synthetic, load_dataset, sample_clip


def _kv(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), engine._parse_value(raw)


def _add_config_args(p: argparse.ArgumentParser, seed_required: bool = True):
    p.add_argument("--config", type=Path, help="INI config file ([train], [model], [loss], [diffusion])")
    p.add_argument("--set", dest="overrides", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set loss.adv=0.01 --set model.channels=(8,16,32,64)")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", dest="K", type=int, help="reverse-chain steps K")


def _build_config(args) -> engine.TrainConfig:
    cfg = engine.load_config(args.config) if args.config else engine.TrainConfig()
    overrides = dict(args.overrides)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("K", "diffusion.K"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for flag, key in (("no_mdm", "mdm_on"), ("no_trm", "trm_on"), ("no_ass", "ass_on")):
        if getattr(args, flag, False):
            overrides[key] = False
    return engine.apply_overrides(cfg, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polypdiff", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic video dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n-cases", type=int, default=SyntheticConfig.n_cases)
    g.add_argument("--frames-per-case", type=int, default=SyntheticConfig.frames_per_case)
    g.add_argument("--size", type=int, default=SyntheticConfig.height, help="frame height and width")
    g.add_argument("--hard-fraction", type=float, default=SyntheticConfig.hard_fraction)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    _add_config_args(t)
    t.add_argument("--no-mdm", action="store_true", help="drop the classification/detection terms")
    t.add_argument("--no-trm", action="store_true", help="disable the temporal branch")
    t.add_argument("--no-ass", action="store_true", help="disable adversarial self-supervision")

    i = sub.add_parser("infer", help="predict one frame's mask")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--case", required=True)
    i.add_argument("--frame", type=int, required=True)
    i.add_argument("--seed", type=int, required=True)
    i.add_argument("--steps", dest="K", type=int)
    i.add_argument("--out", type=Path, help="write the probability map as an 8-bit PNG")

    e = sub.add_parser("eval", help="score a checkpoint on the test splits")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", dest="K", type=int)
    e.add_argument("--splits", nargs="+", help="restrict to these splits, e.g. easy-seen hard-unseen")
    e.add_argument("--per-case", action="store_true")
    e.add_argument("--out", type=Path, help="directory for report.csv / report.json")

    a = sub.add_parser("ablate", help="train and score ablations #1-#4 and the full model")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    _add_config_args(a)
    return parser


def _cmd_generate(args) -> int:
    cfg = SyntheticConfig(n_cases=args.n_cases, frames_per_case=args.frames_per_case, height=args.size,
                          width=args.size, hard_fraction=args.hard_fraction)
    generate_synthetic(cfg, args.out, args.seed)
    print(json.dumps(load_dataset(args.out).counts(), sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    res = engine.train(cfg, load_dataset(args.data), args.out)
    print(json.dumps({"steps": res.state.step, "best_val_dice": res.state.best_dice,
                      "checkpoint": str(args.out / "last.ckpt")}))
    return 0


def _cmd_infer(args) -> int:
    state = engine.load_state(args.checkpoint)
    index = load_dataset(args.data)
    clip = sample_clip(index, args.case, args.frame, state.cfg.delta, state.cfg.patch_size)
    prob = engine.infer_clip(state, clip, args.K, args.seed)
    if args.out:
        from PIL import Image
        args.out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(prob * 255).astype(np.uint8), mode="L").save(args.out)
    print(json.dumps({"case": args.case, "frame": args.frame, "foreground_fraction": float((prob >= 0.5).mean())}))
    return 0


def _cmd_eval(args) -> int:
    if args.checkpoint is None:
        print("polypdiff eval: error: --checkpoint is required", file=sys.stderr)
        return 2
    if not args.checkpoint.is_file():
        print(f"polypdiff eval: error: checkpoint {args.checkpoint} does not exist", file=sys.stderr)
        return 2
    state = engine.load_state(args.checkpoint)
    report, _ = engine.evaluate(state, load_dataset(args.data), splits=args.splits, seed=args.seed, K=args.K,
                                per_case=args.per_case, out_dir=args.out)
    print(report.to_csv(), end="")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_config(args)
    results = engine.run_ablation(cfg, load_dataset(args.data), args.out)
    table = engine.ablation_table(results)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text(table)
    print(table, end="")
    return 0


COMMANDS = {"generate-data": _cmd_generate, "train": _cmd_train, "infer": _cmd_infer, "eval": _cmd_eval,
            "ablate": _cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DatasetError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"polypdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
