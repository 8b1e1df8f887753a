"""``corrseg <generate|train|eval|gradcheck> --config PATH [--seed N] [--cr on|off] [--out DIR]``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config

COMMANDS = ("generate", "train", "eval", "gradcheck")


class CommandError(RuntimeError):
    pass


def _thread_limit():
    n = os.environ.get("CORRSEG_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.training.seed = args.seed
    if args.cr is not None:
        cfg.network = replace(cfg.network, cr_enabled=args.cr == "on")
    if args.out is not None:
        cfg.paths = replace(cfg.paths, out_dir=args.out)
    cfg.paths = cfg.paths.resolve()
    return cfg


def cmd_generate(cfg: RunConfig) -> int:
    from .synthetic import make_dataset

    train, test = make_dataset(cfg.phantom_spec(), cfg.data.n_train, cfg.data.n_test, cfg.paths.data_dir)
    print(f"wrote {len(train)} train and {len(test)} test samples to {cfg.paths.data_dir}")
    return 0


def _load_data(cfg: RunConfig):
    from .synthetic import load_dataset

    try:
        return load_dataset(cfg.paths.data_dir)
    except FileNotFoundError as exc:
        raise CommandError(f"{exc} (run 'corrseg generate' first)") from exc


def cmd_train(cfg: RunConfig) -> int:
    from .network import build_network
    from .training import train

    train_set, _, _ = _load_data(cfg)
    net = build_network(cfg.network, cfg.seed)
    history = train(net, train_set, cfg.training, out_dir=cfg.paths.checkpoint_dir)
    last = history.epochs[-1]
    print(
        f"trained {len(history)} epochs: final total {last.total:.4f} dice {last.dice:.4f} "
        f"l1 {last.l1:.4f}; best epoch {history.best_epoch}; checkpoints in {cfg.paths.checkpoint_dir}"
    )
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .evaluation import evaluate, write_report
    from .network import checkpoint_exists, load_checkpoint

    ckpt = Path(cfg.paths.checkpoint_dir) / "best"
    if not checkpoint_exists(ckpt):
        raise CommandError(f"checkpoint not found: {ckpt}")
    net = load_checkpoint(ckpt)
    _, test_set, _ = _load_data(cfg)
    report = evaluate(net, test_set, cfg.eval.threshold)
    write_report(report, cfg.paths.report)
    full = report.full_row
    print(
        f"full-modality dice: complete {full.dice_complete:.4f} core {full.dice_core:.4f} "
        f"enhancing {full.dice_enhancing:.4f}; report written to {cfg.paths.report}"
    )
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .checks import run_and_print

    return 0 if run_and_print(seeds=(cfg.seed, cfg.seed + 1, cfg.seed + 2)) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrseg", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--cr", choices=("on", "off"), default=None, help="enable the correlation block")
    parser.add_argument("--out", default=None, help="output directory (overrides paths.out_dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _apply_overrides(parse_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "config": cfg.to_dict()}, indent=2))
    handler = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}
    try:
        with _thread_limit():
            return handler[args.command](cfg)
    except (CommandError, OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
