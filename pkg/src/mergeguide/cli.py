"""Command line entry point: ``mergeguide <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import points24 as env
from .checkpoint import CheckpointBuffer, CheckpointError
from .merge import EMA_MODES, METHODS, WEIGHTINGS, MergeConfig, merge
from .trainer import ConfigError, ablate, evaluate, load_config, merged_vs_current, train


def _cards(text: str) -> list[int]:
    try:
        cards = [int(c) for c in text.replace(" ", "").split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cards must be comma-separated integers, got {text!r}")
    if len(cards) != 4 or any(not 1 <= c <= 10 for c in cards):
        raise argparse.ArgumentTypeError("need exactly four cards with values 1..10")
    return cards


def cmd_train(args) -> int:
    config = load_config(args.config, variant=args.variant, seed=args.seed, out_dir=args.out)
    result = train(config)
    last = result.metrics[-1] if result.metrics else None
    print(f"run directory: {config.out_dir}")
    print(f"epochs: {len(result.metrics)}")
    if last is not None:
        print(f"final eval success rate: {last['eval_success_rate']:.4f}")
    return 0


def cmd_eval(args) -> int:
    res = evaluate(ckpt_io.load(args.checkpoint), args.episodes, args.seed,
                   require_all_cards=args.require_all_cards)
    print(f"episodes: {res.episodes}")
    print(f"success_rate: {res.success_rate:.4f}")
    print(f"mean_return: {res.mean_return:.4f}")
    return 0


def cmd_merge(args) -> int:
    config = MergeConfig(method=args.method, density_k=args.density, weighting=args.weighting,
                         alpha=args.alpha, ema_mode=args.ema_mode.replace("-", "_"))
    base = ckpt_io.load(args.base)
    buffer = CheckpointBuffer(base, ckpt_io.load_many(args.inputs))
    merged = merge(buffer, config)
    ckpt_io.save(merged, args.out)
    print(f"merged {len(args.inputs)} checkpoints into {args.out}")
    return 0


def cmd_solve(args) -> int:
    witness = env.solve(args.cards, args.require_all_cards)
    print("UNSOLVABLE" if witness is None else " ".join(witness))
    return 0


def cmd_dataset(args) -> int:
    records = env.make_sft_dataset(args.hands, np.random.default_rng(args.seed), args.require_all_cards)
    text = "".join(r.to_line() + "\n" for r in records)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"{len(records)} records written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config, out_dir=args.out)
    rows = ablate(config, args.sweep)
    for row in rows:
        print(f"{row['cell']}\t{row['final_success_rate']:.4f}")
    print(f"summary: {Path(config.out_dir) / 'ablation.csv'}")
    return 0


def cmd_fig2(args) -> int:
    rows = merged_vs_current(args.run, args.episodes, args.seed)
    if not rows:
        print("no epochs with a mergeable history")
        return 0
    cur = np.array([r["current_success_rate"] for r in rows])
    mer = np.array([r["merged_success_rate"] for r in rows])
    print(f"epochs compared: {len(rows)}")
    print(f"current: mean {cur.mean():.4f} std {cur.std():.4f}")
    print(f"merged:  mean {mer.mean():.4f} std {mer.std():.4f}")
    print(f"table: {Path(args.run) / 'fig2.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mergeguide",
                                description="Checkpoint-merge guided PPO on the Points24 game.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training job from a key=value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", choices=("sft", "kl"))
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=200)
    e.add_argument("--seed", type=int, default=12345)
    e.add_argument("--require-all-cards", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="merge checkpoints against a base")
    m.add_argument("--inputs", nargs="+", required=True)
    m.add_argument("--base", required=True)
    m.add_argument("--method", choices=METHODS, default="ties")
    m.add_argument("--weighting", choices=WEIGHTINGS, default="sma")
    m.add_argument("--alpha", type=float, default=0.5)
    m.add_argument("--ema-mode", choices=[s.replace("_", "-") for s in EMA_MODES] + list(EMA_MODES),
                   default="closed-form")
    m.add_argument("--density", type=float, default=0.8)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    s = sub.add_parser("solve", help="print a winning action sequence or UNSOLVABLE")
    s.add_argument("--cards", type=_cards, required=True, help="e.g. 3,3,8,8")
    s.add_argument("--require-all-cards", action="store_true")
    s.set_defaults(func=cmd_solve)

    d = sub.add_parser("dataset", help="emit solver-labelled records cards|formula|thought|action")
    d.add_argument("--hands", type=int, default=100)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.add_argument("--require-all-cards", action="store_true")
    d.set_defaults(func=cmd_dataset)

    a = sub.add_parser("ablate", help="one run per cell of a sweep like 'estimator=k1,clip'")
    a.add_argument("--config", required=True)
    a.add_argument("--sweep", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("fig2", help="merged-vs-current table for a finished run")
    f.add_argument("--run", required=True)
    f.add_argument("--episodes", type=int)
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fig2)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
