"""Command-line entry point: ``pcl <command> [options]``.

Exit codes: 0 success, 2 configuration error (the message names the field),
3 unreadable or malformed input, 4 training divergence, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import runner
from .config import PRESETS, load_yaml, resolve, set_dotted
from .errors import (BoundsError, ConfigError, DivergenceError, DomainError, InputError,
                     PCLError)

log = logging.getLogger("pcl")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _parse_set(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _experiment(args, data_path=None):
    raw = load_yaml(args.config) if args.config else {}
    for key, value in _parse_set(getattr(args, "set", None)).items():
        set_dotted(raw, key, value)
    if getattr(args, "device", None):
        set_dotted(raw, "train.device", args.device)
    if getattr(args, "workers", None) and args.command == "pretrain":
        set_dotted(raw, "train.workers", args.workers)
    if data_path:
        set_dotted(raw, "data.path", str(data_path))
    return resolve(raw, args.preset, args.seed)


def cmd_synth(args):
    raw = load_yaml(args.config) if args.config else {}
    exp = resolve(raw, "desk")
    if args.seed is not None:
        exp.data.seed = args.seed
    if exp.data.path:
        raise ConfigError("data.path", "synth builds a synthetic corpus; remove data.path")
    dataset = exp.load_dataset()
    dataset.save(args.out)
    counts = {s: len(dataset.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(dataset.records)} videos ({counts}) to {args.out}")


def cmd_pretrain(args):
    exp = _experiment(args, args.data)
    dataset = exp.load_dataset()
    if args.resume:
        from .training import train
        runner.freeze_experiment(exp, args.out, args.config)
        state = train(exp.train, dataset, args.out, resume=args.resume)
    else:
        state = runner.pretrain(exp, args.out, dataset, source=args.config)
    print(f"best epoch {state.best_epoch}, val metric {state.best_metric:.6f}; "
          f"checkpoints in {args.out}")


def cmd_retrieve(args):
    exp = _experiment(args, args.data)
    state = runner.load_best(args.checkpoint, args.device)
    report = runner.retrieve(state, exp.load_dataset(), exp, args.out)
    row = runner.summary_row(exp, Path(args.out).name, state, report)
    (Path(args.out) / runner.SUMMARY).write_text(json.dumps(row, indent=2) + "\n")
    print(json.dumps({f"top{k}": round(v, 4) for k, v in report.topk_accuracy.items()}))


def cmd_finetune(args):
    exp = _experiment(args, args.data)
    state = runner.load_best(args.checkpoint, args.device) if args.checkpoint else None
    res = runner.finetune(state, exp.load_dataset(), exp, args.out,
                          linear_probe=True if args.linear_probe else None)
    print(f"test accuracy {res.test_accuracy:.4f} (best val epoch {res.best_epoch})")


def cmd_ablate(args):
    extra = _parse_set(args.set)
    if args.device:
        extra["train.device"] = args.device
    rows = runner.ablate(args.matrix, args.out, args.preset, args.seed, args.workers or 1, extra)
    print(f"{len(rows)} runs; table in {Path(args.out) / 'results.tsv'}")


def cmd_report(args):
    from .report import build_report

    rows = build_report(args.runs, args.out, first_ten=args.first_ten, plots=not args.no_plots)
    print(f"{len(rows)} rows; report in {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcl", description="Pretext-contrastive video learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the run seed")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        sp.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda")
        sp.add_argument("--workers", type=int, default=None, help="parallel workers")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field by dotted path (repeatable)")

    sp = sub.add_parser("synth", help="write the synthetic corpus to disk")
    sp.add_argument("--config", help="config whose data.synthetic section describes the corpus")
    sp.add_argument("--seed", type=int, default=None, help="corpus seed")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="self-supervised pretraining")
    common(sp)
    sp.add_argument("--data", help="dataset directory (overrides data.path)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--out", required=True, help="run directory")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("retrieve", help="kNN retrieval with a pretrained encoder")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    sp.add_argument("--data", help="dataset directory (overrides data.path)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_retrieve)

    sp = sub.add_parser("finetune", help="supervised recognition on top of an encoder")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint or run directory; omit for random init")
    sp.add_argument("--data", help="dataset directory (overrides data.path)")
    sp.add_argument("--linear-probe", action="store_true", help="freeze the encoder")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("ablate", help="run every cell of an ablation matrix")
    common(sp)
    sp.add_argument("matrix", help="matrix YAML (cells or grid)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="aggregate run directories into tables and plots")
    sp.add_argument("runs", nargs="+", help="run or ablation output directories")
    sp.add_argument("--out", required=True)
    sp.add_argument("--first-ten", action="store_true",
                    help="t-SNE on the first ten class names in alphabetical order")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, BoundsError, DomainError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
