"""Command-line surface.

Subcommands: synth, train, eval, ablate, fewshot, report.  Every command
takes a config file in the flat key=value format (see dualkd.config); paths
given on the command line override the config's out_dir.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import os
import re
import sys

from .config import load_config
from .data import dump_dataset, generate
from .distill import read_score_records
from .errors import ConfigError, DataError, NumericError
from .evaluate import (FUSIONS, SCORE_VARIANTS, emit_report, evaluate,
                       report_from_json, run_ablation, run_fewshot,
                       write_ablation_csv, write_fewshot_csv)
from .train import train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse uses exit code 2 for usage errors; we reserve 2 for data
    problems, so usage errors are rethrown and mapped to 1."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dualkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="experiment config file")
        p.add_argument("--out", default=None,
                       help="override the config's out_dir")
        return p

    add("synth", "generate the config's dataset and write it as a folder")
    p = add("train", "train one model per roster entry")
    p.add_argument("--resume", action="store_true",
                   help="continue from the newest checkpoint")
    p = add("eval", "score the test split and write metric reports")
    p.add_argument("--variant", default="last_token", choices=SCORE_VARIANTS,
                   help="which encoder score enters the fused score")
    p.add_argument("--fusion", default="noisy_or", choices=FUSIONS,
                   help="how the two branch scores combine")
    p = add("ablate", "train/evaluate all component-flag combinations")
    p.add_argument("--no-resume", action="store_true",
                   help="retrain even if checkpoints exist")
    p = add("fewshot", "sweep the training-set size per roster entry")
    p.add_argument("--shots", default="1,2,4,8",
                   help="comma-separated shot counts")
    p.add_argument("--no-resume", action="store_true",
                   help="retrain even if checkpoints exist")
    p = sub.add_parser("report",
                       help="re-render stored eval artifacts (JSON + score "
                            "CSVs) into the chosen formats")
    p.add_argument("--dir", required=True, help="directory with report.json")
    p.add_argument("--formats", default="histogram",
                   help="comma list from json,csv,histogram")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        from dataclasses import replace
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _cmd_synth(args) -> int:
    cfg = _load(args)
    dataset = generate(cfg.dataset)
    root = os.path.join(cfg.out_dir, "dataset")
    dump_dataset(dataset, root)
    print(f"wrote {len(dataset.samples)} samples to {root}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load(args)
    states = train(cfg, resume=args.resume)
    for name, state in sorted(states.items()):
        print(f"{name}: iteration {state.iteration}, "
              f"mean loss {state.mean_loss:.6f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load(args)
    report = evaluate(cfg, score_variant=args.variant, fusion=args.fusion)
    out = os.path.join(cfg.out_dir, "eval")
    emit_report(report, out)
    for key, value in sorted(report.mean.items()):
        print(f"mean {key}: {value:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    rows = run_ablation(cfg, resume=not args.no_resume)
    path = os.path.join(cfg.out_dir, "ablation.csv")
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_ablation_csv(rows, path)
    print("enc dec tok nor   auroc      ap   f1max")
    for r in rows:
        flags = "   ".join(str(int(f)) for f in
                           (r.use_encoder, r.use_decoder, r.use_last_token,
                            r.use_noisy_or))
        print(f"  {flags}  {r.report.mean['auroc']:.4f}  "
              f"{r.report.mean['ap']:.4f}  {r.report.mean['f1max']:.4f}")
    print(f"table in {path}")
    return EXIT_OK


def _parse_shots(raw: str) -> tuple:
    try:
        shots = tuple(int(tok) for tok in raw.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"bad --shots value {raw!r}") from None
    if not shots:
        raise ConfigError("--shots must list at least one count")
    return shots


def _cmd_fewshot(args) -> int:
    cfg = _load(args)
    points = run_fewshot(cfg, shots=_parse_shots(args.shots),
                         resume=not args.no_resume)
    path = os.path.join(cfg.out_dir, "fewshot.csv")
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_fewshot_csv(points, path)
    for p in points:
        print(f"shots {p.shots}: mean auroc {p.mean_auroc:.4f}")
    print(f"table in {path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    report_path = os.path.join(args.dir, "report.json")
    if not os.path.exists(report_path):
        raise ConfigError(f"{report_path} not found; run eval first")
    with open(report_path, encoding="ascii") as fh:
        report = report_from_json(fh.read())
    for path in sorted(glob.glob(os.path.join(args.dir, "scores_*.csv"))):
        name = re.fullmatch(r"scores_(.+)\.csv", os.path.basename(path)).group(1)
        report.records[name] = read_score_records(path)
    if not report.records:
        raise DataError(f"no scores_*.csv under {args.dir}")
    formats = tuple(tok for tok in args.formats.split(",") if tok.strip())
    bad = set(formats) - {"json", "csv", "histogram"}
    if bad:
        raise ConfigError(f"unknown formats: {sorted(bad)}")
    written = emit_report(report, args.dir, formats=formats)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "fewshot": _cmd_fewshot,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint():
    raise SystemExit(main())
