"""Command line entry point: ``mace-toy <verb> [options]``.

Verbs run one pipeline stage each (pretrain, refine, train, fuse, eval) or
the whole experiment (demo).  Outputs go under ``$MACE_DATA_DIR`` when set,
otherwise under the config's ``output_dir``.  Exit codes: 0 success,
2 bad input, 3 numerical failure, 4 a gate failed.
"""
from __future__ import annotations

import argparse
import sys

from . import pipeline as P
from .errors import GateFailure, MaceError


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--workers", type=int, help="override [run] workers")
    common.add_argument("--dry-run", action="store_true", help="print the plan and exit")

    ap = argparse.ArgumentParser(prog="mace-toy", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("pretrain", parents=[common], help="train the toy text-to-image model")
    p.add_argument("--out")
    p = sub.add_parser("refine", parents=[common], help="closed-form refinement of K/V projections")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p = sub.add_parser("train", parents=[common], help="train one LoRA pair per erased concept")
    p.add_argument("--checkpoint")
    p.add_argument("--refined")
    p.add_argument("--sampler", choices=["cfis", "uniform"])
    p = sub.add_parser("fuse", parents=[common], help="merge the LoRA modules into the refined model")
    p.add_argument("--mode", choices=[P.CLOSED_FORM, P.NAIVE])
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint against the original")
    p.add_argument("--before")
    p.add_argument("--after")
    p.add_argument("--out")
    p = sub.add_parser("demo", parents=[common], help="run every stage, ablations and figures")
    p.add_argument("--no-figures", action="store_true")
    return ap


def load_config(args) -> P.ErasureConfig:
    cfg = P.ErasureConfig.load(args.config) if args.config else P.ErasureConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg.validate()


def run(args, log=print) -> int:
    cfg = load_config(args)
    if args.dry_run and args.verb != "demo":
        for line in P.demo_plan(cfg):
            log(line)
        return 0
    if args.verb == "pretrain":
        P.cmd_pretrain(cfg, args.out, log=log)
    elif args.verb == "refine":
        P.cmd_refine(cfg, args.checkpoint, args.out, log=log)
    elif args.verb == "train":
        P.cmd_train(cfg, args.checkpoint, args.refined, sampler=args.sampler, log=log)
    elif args.verb == "fuse":
        P.cmd_fuse(cfg, args.mode, log=log)
    elif args.verb == "eval":
        P.cmd_eval(cfg, args.before, args.after, args.out, log=log)
    elif args.verb == "demo":
        man = P.cmd_demo(cfg, dry_run=args.dry_run, log=log, figures=not args.no_figures)
        if not args.dry_run and not man.passed:
            failed = [k for k, g in man.gates.items() if not g["passed"]]
            raise GateFailure(f"gates failed: {', '.join(failed)}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except MaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
