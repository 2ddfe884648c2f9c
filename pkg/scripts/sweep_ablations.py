#!/usr/bin/env python3
"""Parameter sweeps over the reference world, one CSV per knob.

Defaults sweep the fusion weight and the activation-map threshold; pass
--parameter/--values for any other config path.

    python scripts/sweep_ablations.py --out /tmp/ccd_sweeps
    python scripts/sweep_ablations.py --out /tmp/x \\
        --parameter views.perturb_k --values 0 1 2 4
"""

import argparse
import json
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from ccd.cli import main as ccd  # noqa: E402

DEFAULT_SWEEPS = [
    ("fuse_alpha", [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]),
    ("views.cam_threshold", [0.5, 0.7, 0.9, 0.95, 0.99]),
]


def run(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="out/sweeps")
    parser.add_argument("--config", default=str(REPO / "configs" / "reference.json"))
    parser.add_argument("--parameter", default=None)
    parser.add_argument("--values", nargs="+", type=float, default=None)
    args = parser.parse_args(argv)

    sweeps = ([(args.parameter, args.values)]
              if args.parameter and args.values else DEFAULT_SWEEPS)

    for parameter, values in sweeps:
        doc = json.loads(Path(args.config).read_text())
        doc["sweep"] = {"parameter": parameter, "values": values}
        out = Path(args.out) / parameter.replace(".", "_")
        out.mkdir(parents=True, exist_ok=True)
        config_path = out / "sweep_config.json"
        config_path.write_text(json.dumps(doc, indent=2))
        code = ccd(["sweep", "--config", str(config_path), "--out", str(out)])
        if code != 0:
            return code
        print(f"\n{parameter}:")
        print((out / "sweep" / "sweep.csv").read_text())
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
