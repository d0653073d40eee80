"""Command-line surface.

    scvm train --config cfg.json --out runs/exp1
    scvm eval --ckpt runs/exp1/final.scvm --n 2000 --seed 99
    scvm gradcheck
    scvm inspect --ckpt runs/exp1/final.scvm --seed 5 --out gates.csv

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import CheckpointError
from .tensor import NumericalError
from .trainer import (
    ConfigError,
    TrainingAborted,
    default_config,
    evaluate_checkpoint,
    inspect_checkpoint,
    load_config_file,
    run_training,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scvm")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the two-phase training recipe")
    p_train.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument(
        "--pretrain-baseline", dest="pretrain", action="store_true", default=True,
        help="pretrain a baseline backbone before the main phase (default)",
    )
    p_train.add_argument("--no-pretrain-baseline", dest="pretrain", action="store_false")
    p_train.add_argument("--disable-scvm", action="store_true",
                         help="train the head-only control (no memory modules)")
    p_train.add_argument("--disable-tmsu-text", action="store_true",
                         help="feed zeros instead of the question vector into the memory cell")
    p_train.add_argument("--disable-tag", action="store_true",
                         help="token gate becomes the identity")
    p_train.add_argument("--lambda", dest="lambda_align", type=float, default=None,
                         help="alignment loss weight override")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--steps", type=int, default=None,
                         help="main-phase step override")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--n", type=int, required=True)
    p_eval.add_argument("--seed", type=int, required=True)

    sub.add_parser("gradcheck", help="run the finite-difference oracle suite")

    p_inspect = sub.add_parser("inspect", help="dump per-layer gate statistics")
    p_inspect.add_argument("--ckpt", required=True)
    p_inspect.add_argument("--seed", type=int, required=True)
    p_inspect.add_argument("--out", required=True, help="CSV output path")

    return parser


def _cmd_train(args) -> int:
    cfg = load_config_file(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.total_steps = args.steps
        cfg.train.warmup_steps = min(cfg.train.warmup_steps, args.steps)
    if args.lambda_align is not None:
        if args.lambda_align < 0:
            raise ConfigError("lambda must be non-negative")
        cfg.train.lambda_align = args.lambda_align
    if args.disable_scvm:
        cfg.scvm.enabled = False
    if args.disable_tmsu_text:
        cfg.scvm.disable_text = True
    if args.disable_tag:
        cfg.scvm.disable_tag = True
    result = run_training(cfg, args.out, pretrain=args.pretrain)
    print(json.dumps(result))
    return EXIT_OK


def _cmd_eval(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    report = evaluate_checkpoint(args.ckpt, seed=args.seed, n=args.n)
    print(json.dumps(report))
    return EXIT_OK


def _cmd_gradcheck() -> int:
    from .verification import format_report, run_suite

    results = run_suite()
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def _cmd_inspect(args) -> int:
    traces = inspect_checkpoint(args.ckpt, args.seed, args.out)
    print(f"wrote {len(traces)} layer records to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck()
        if args.command == "inspect":
            return _cmd_inspect(args)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, TrainingAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
