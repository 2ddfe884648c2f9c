#!/usr/bin/env python3
"""End-to-end run on the reference synthetic world.

Generates the dataset, runs every pipeline stage through the CLI (including
the subprocess view provider), and prints the final per-class AP table plus
the bias report. Everything lands under --out.

    python scripts/run_reference_world.py --out /tmp/ccd_ref
"""

import argparse
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from ccd.cli import main as ccd  # noqa: E402


def run(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="out/reference", help="workspace directory")
    parser.add_argument("--config", default=str(REPO / "configs" / "reference.json"))
    args = parser.parse_args(argv)

    start = time.monotonic()
    for stage, extra in [("synth", []), ("label-init", []), ("report", []),
                         ("train", ["--full"]), ("eval", [])]:
        print(f"== ccd {stage}", flush=True)
        code = ccd([stage, "--config", args.config, "--out", args.out] + extra)
        if code != 0:
            return code
    print(f"done in {time.monotonic() - start:.1f}s; artifacts in {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
