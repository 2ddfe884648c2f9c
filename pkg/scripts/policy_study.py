#!/usr/bin/env python3
"""Proof-of-concept box-policy study on the reference world.

Trains the full pipeline four times, replacing the activation-map views with
each fixed policy (jittered GT boxes / GT boxes / random boxes / uniform 3x3
grid, nine patches per image), and prints the resulting mAP per policy.

    python scripts/policy_study.py --out /tmp/ccd_policies
"""

import argparse
import json
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from ccd import pipeline  # noqa: E402
from ccd.cam_views import ViewSet  # noqa: E402
from ccd.config import config_hash, parse_config  # noqa: E402
from ccd.synth import POLICIES, policy_views  # noqa: E402
from ccd.synth_provider import SyntheticOracle  # noqa: E402
from ccd.view_provider import LoopbackChannel  # noqa: E402


def run(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="out/policy_study")
    parser.add_argument("--config", default=str(REPO / "configs" / "reference.json"))
    parser.add_argument("--patches", type=int, default=9, help="patches per image")
    args = parser.parse_args(argv)

    doc = json.loads(Path(args.config).read_text())
    doc["provider"]["cache"] = None
    results = {}
    for policy in POLICIES:
        cfg = parse_config(json.loads(json.dumps(doc)))
        h = config_hash(doc)
        out = Path(args.out) / policy
        out.mkdir(parents=True, exist_ok=True)
        world = pipeline.run_synth(cfg, h, out)
        pipeline.run_label_init(cfg, h, out)
        pipeline.run_warmup(cfg, h, out)
        override = {
            im.image_id: ViewSet(image_id=im.image_id,
                                 boxes=policy_views(policy, im, k=args.patches,
                                                    seed=cfg.seed))
            for im in world.images
        }
        pipeline.run_update_labels(cfg, h, out, views_override=override,
                                   channel=LoopbackChannel(SyntheticOracle(world)))
        pipeline.run_train(cfg, h, out)
        results[policy] = pipeline.run_eval(cfg, h, out).mean

    print("\npolicy comparison (mAP):")
    for policy in POLICIES:
        print(f"  {policy:10s} {results[policy]:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
