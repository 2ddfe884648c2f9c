"""Command-line entry point.

    ccd <stage> --config CONFIG.json --out DIR

Stages: synth, label-init, warmup, update-labels, train (add --full to run
warmup + update-labels + main training in one go), eval, report, sweep.

Exit codes: 2 config error, 3 input data error, 4 provider/protocol error,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import CcdError

STAGES = ("synth", "label-init", "warmup", "update-labels", "train",
          "eval", "report", "sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccd",
                                     description="pseudo-label pipeline over precomputed embeddings")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", required=True, metavar="DIR")
        if stage == "train":
            p.add_argument("--full", action="store_true",
                           help="run warmup, update-labels, then the main phase")
        if stage == "eval":
            p.add_argument("--head-stage", default="train", choices=("train", "warmup"),
                           help="which trained head to evaluate")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, cfg_hash = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)

        if args.stage == "synth":
            pipeline.run_synth(cfg, cfg_hash, out)
        elif args.stage == "label-init":
            pipeline.run_label_init(cfg, cfg_hash, out)
        elif args.stage == "warmup":
            pipeline.run_warmup(cfg, cfg_hash, out)
        elif args.stage == "update-labels":
            pipeline.run_update_labels(cfg, cfg_hash, out)
        elif args.stage == "train":
            pipeline.run_train(cfg, cfg_hash, out, full=args.full)
        elif args.stage == "eval":
            pipeline.run_eval(cfg, cfg_hash, out, head_stage=args.head_stage)
        elif args.stage == "report":
            pipeline.run_report(cfg, cfg_hash, out)
        elif args.stage == "sweep":
            config_doc = json.loads(Path(args.config).read_text())
            pipeline.run_sweep(cfg, cfg_hash, out, config_doc)
    except CcdError as exc:
        print(f"ccd {args.stage}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
