"""Command-line entry point: ``train``, ``eval`` and ``replay``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .env import Difficulty, Split
from .exceptions import ReplayDivergence
from .harness import RunConfig, evaluate, replay, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embodied-ipo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every update")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy from an INI config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override schedule.master_seed")
    p.add_argument("--output-dir", default=None, help="override logging.output_dir")

    p = sub.add_parser("eval", help="completion rate of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["seen", "unseen"], required=True)
    p.add_argument("--greedy", action="store_true", help="argmax choices instead of seeded sampling")
    p.add_argument("--episodes", type=int, default=64)
    p.add_argument("--difficulty", choices=[d.value for d in Difficulty], default=Difficulty.EASY.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="append evaluated trajectories to this JSON Lines file")

    p = sub.add_parser("replay", help="re-execute a logged trajectory and print its transcript")
    p.add_argument("--log", required=True)
    p.add_argument("--index", type=int, required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "train":
        overrides = {}
        if args.seed is not None:
            overrides["schedule.master_seed"] = args.seed
        config = RunConfig.from_ini(args.config, overrides)
        if args.output_dir:
            config.logging.output_dir = args.output_dir
        result = train(config)
        last = result.metrics[-1] if result.metrics else None
        print(json.dumps({
            "checkpoint": str(result.checkpoint),
            "metrics": str(result.metrics_path),
            "updates": len(result.metrics),
            "final_mean_reward": last.mean_reward if last else None,
        }))
        return 0

    if args.command == "eval":
        split = Split.SEEN if args.split == "seen" else Split.UNSEEN
        res = evaluate(
            args.checkpoint, split, args.episodes, args.greedy, args.difficulty, args.seed, log_path=args.log
        )
        print(json.dumps({"split": split.value, "rate": res.rate, "episodes": res.episodes, "per_type": res.per_type}))
        return 0

    try:
        print(replay(args.log, args.index))
    except ReplayDivergence as err:
        print(str(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
