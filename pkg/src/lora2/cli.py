"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config, checkpoint or a
failed check), 2 runtime abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import CheckpointError, describe, total_bytes

log = logging.getLogger("lora2")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ranks(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ranks must be comma-separated integers: {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("need at least one rank")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lora2", description="Adaptive-rank LoRA trainer and benchmark harness.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one adapter set on the toy teacher task")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("sweep", help="fixed-rank sweep plus one adaptive run")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--ranks", type=_ranks, default=[8, 16, 32, 64, 128, 256, 512])
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--no-figures", action="store_true")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--trials", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="print per-layer ranks and size of a checkpoint")
    r.add_argument("--ckpt", required=True, type=Path)

    sub.add_parser("selftest", help="run the property suites")
    return p


def _train(args) -> int:
    from .checkpoint import save_checkpoint
    from .reports import export_reports
    from .trainer import train_run

    config = cfgmod.load(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    history = train_run(config)
    args.out.mkdir(parents=True, exist_ok=True)
    nbytes = save_checkpoint(history.model, args.out / "adapter.alr2")
    export_reports(history, args.out, figures=not args.no_figures)
    print(f"final mse {history.final['mse']:.6g}  ranks {history.final_ranks}  "
          f"checkpoint {nbytes} bytes -> {args.out}")
    return 0


def _sweep(args) -> int:
    from .reports import write_sweep
    from .trainer import sweep

    config = cfgmod.load(args.config)
    rows = sweep(config, args.ranks)
    write_sweep(rows, args.out, figures=not args.no_figures)
    for r in rows:
        print(f"{r.label:<16s} mse {r.final_mse:<12.6g} params {r.params:<8d} bytes {r.bytes}")
    return 0


def _print_checks(results) -> int:
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


def _report(args) -> int:
    records = describe(args.ckpt)
    for rec in records:
        print(f"{rec['name']:<16s} {rec['m']}x{rec['n']}  D={rec['d']}  nu={rec['nu']:.6g}")
    print(f"total {total_bytes(records)} bytes ({args.ckpt.stat().st_size} on disk)")
    return 0


def main(argv: list[str] | None = None) -> int:
    from .trainer import TrainingAborted

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return _train(args)
        if args.command == "sweep":
            return _sweep(args)
        if args.command == "gradcheck":
            from .checks import gradcheck_suite

            return _print_checks(gradcheck_suite(args.trials, args.seed))
        if args.command == "report":
            return _report(args)
        if args.command == "selftest":
            from .checks import property_suite

            return _print_checks(property_suite())
    except (cfgmod.ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        for name, info in e.diagnostics["layers"].items():
            print(f"  {name}: {info}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
