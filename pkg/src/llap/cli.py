"""Command-line entry point: ``llap <subcommand> --config run.toml [overrides]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import config as cfgmod
from . import pipeline
from .errors import ConfigError, LlapError

SUBCOMMANDS = ("train", "evidence", "predict", "kscan", "earlystop", "verify", "report")
FORCED_KIND = {"kscan": "k-scan", "earlystop": "early-stop", "verify": "verify"}


def _bool(text):
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="llap", description="Linearised-Laplace experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", help="output directory")
        if name == "report":
            continue
        p.add_argument("--config", required=True, help="TOML run file")
        p.add_argument("--seed", type=int, help="run this seed only")
        p.add_argument("--objective", choices=cfgmod.OBJECTIVES)
        p.add_argument("--tying", choices=cfgmod.TYINGS)
        p.add_argument("--include-biases", type=_bool, metavar="{true|false}")
    return parser


def load_config(args):
    cfg = cfgmod.load(args.config)
    cfg = cfgmod.override(cfg, seed=args.seed, out=args.out, objective=args.objective, tying=args.tying,
                          include_biases=args.include_biases)
    if args.command in FORCED_KIND:
        cfg = dataclasses.replace(cfg, kind=FORCED_KIND[args.command])
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            if not args.out:
                raise ConfigError("report needs --out")
            summary = pipeline.report(args.out)
            json.dump(summary, sys.stdout, indent=2)
            sys.stdout.write("\n")
            return 0
        cfg = load_config(args)
        if args.command == "train":
            records = pipeline.train_only(cfg)
        elif args.command in ("evidence", "predict") and cfg.kind not in ("toy-regression", "classification"):
            raise ConfigError(f"{args.command} needs a toy-regression or classification config")
        else:
            records = pipeline.run_pipeline(cfg, predict=args.command != "evidence")
    except (LlapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failed = [r for r in records if not r.converged or (r.kind == "verify" and not r.extras.get("ok"))]
    print(f"{len(records)} record(s) written to {cfg.out}/metrics.ndjson; {len(failed)} flagged")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
