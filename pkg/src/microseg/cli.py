"""Command line entry point: ``run``, ``joint``, ``eval``, ``report`` and ``data``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from microseg import checkpoint
from microseg.data import save_dataset
from microseg.evaluation import emit_report, fmt, summary_rows
from microseg.trainer import VARIANTS, RunConfig, evaluate, joint_train, make_proposals, run_scenario


def _config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return dataclasses.replace(config, **overrides)


def _print_final(art) -> None:
    rep = art.final.report
    print(f"final base {fmt(rep.base_miou)} novel {fmt(rep.novel_miou)} all {fmt(rep.all_miou)}")


def cmd_run(args: argparse.Namespace) -> int:
    art = run_scenario(_config(args), out_dir=args.out)
    _print_final(art)
    return 0


def cmd_joint(args: argparse.Namespace) -> int:
    art = joint_train(_config(args), out_dir=args.out)
    _print_final(art)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    config_path = args.config or ckpt.parent.parent / "config.txt"
    config = RunConfig.from_file(config_path)
    model = checkpoint.load_checkpoint(ckpt)
    _, val = config.dataset()
    props = {s.sample_id: make_proposals(config, s.mask) for s in val}
    base = config.scenario().classes_at(1)
    report = evaluate(model, val, props, base, branch=config.output_branch)
    print("step,class_id,iou")
    for row in summary_rows(model.step, report):
        print(",".join(row))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    written = emit_report(args.runs, args.out)
    print(Path(written["table"]).read_text(), end="")
    return 0


def cmd_data(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    save_dataset(*config.dataset(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-step progress")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, helptext in (
        ("run", cmd_run, "incremental run over the scenario"),
        ("joint", cmd_joint, "offline training on all classes at once"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", required=True, help="run output directory")
        if name == "run":
            p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint on the validation split")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="defaults to config.txt of the run holding the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate run directories into comparison tables")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("data", help="write the configured synthetic dataset to disk")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
