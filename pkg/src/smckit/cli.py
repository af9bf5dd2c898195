"""Command-line entry points: train, gradcheck, report, inject-noise."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck, report
from .config import ConfigError, load_datasets, parse_config
from .data import DataFormatError, NoiseSpec, inject_label_noise, write_noise_csv
from .trainer import run_experiment


class UsageError(Exception):
    pass


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.output_dir)
    train, val = load_datasets(cfg.dataset)
    header = cfg.to_dict()
    header.pop("output_dir")
    result = run_experiment(cfg.train, train, val, out_dir=out, header=header)
    print(f"best val top-1 {result.best_val:.4f} at epoch {result.best_epoch}; final {result.final_val:.4f}")
    print(f"wrote {out / 'run_log.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(fault=args.fault, tol=args.tol)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_err={r.max_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed (tol {args.tol:g})")
    return 0


def cmd_report(args) -> int:
    if not args.logs:
        raise UsageError("report needs at least one run log")
    logs = [report.read_run_log(p) for p in args.logs]
    table = report.format_table(logs)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    if args.svg:
        report.write_svg(logs, args.svg)
    return 0


def cmd_inject_noise(args) -> int:
    cfg = parse_config(args.config)
    train, _ = load_datasets(cfg.dataset)
    spec = NoiseSpec(cfg.train.noise_eta if args.eta is None else args.eta,
                     cfg.train.noise_seed if args.seed is None else args.seed)
    noisy, mask = inject_label_noise(train, spec)
    write_noise_csv(args.out, train, noisy, mask)
    print(f"corrupted {int(mask.sum())} of {len(mask)} labels; wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smckit", description="Multi-channel self-distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", help="output directory (default: the config's output_dir)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the training loss")
    g.add_argument("--fault", choices=("relu", "maxpool2d", "conv2d", "affine", "log_softmax"),
                   help="corrupt one backward rule to exercise the checker")
    g.add_argument("--tol", type=float, default=gradcheck.TOL)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="summarize run logs")
    r.add_argument("logs", nargs="*")
    r.add_argument("--svg", help="write validation-accuracy curves here")
    r.add_argument("--out", help="also write the table here")
    r.set_defaults(func=cmd_report)

    n = sub.add_parser("inject-noise", help="write the symmetric label-noise mask as CSV")
    n.add_argument("--config", required=True)
    n.add_argument("--eta", type=float)
    n.add_argument("--seed", type=int)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_inject_noise)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"smckit: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataFormatError, report.ReportError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"smckit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
