#!/usr/bin/env python3
"""Desk-scale ablation on the synthetic paired domains.

Runs every arm once per seed and prints the mean target mIoU per arm, then
checks the directional gates:
  self_training >= source_only + 3 points
  siamseg       >= self_training + 2 points
  siamseg_color_jitter >= siamseg_resize_flip + 1 point

Usage:
    uv run python scripts/ablation.py --config configs/synthetic.yaml --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from siamseg.config import apply_ablation, load_config
from siamseg.trainer import fit

logger = logging.getLogger("ablation")

ARMS = ("source_only", "self_training", "siamseg", "siamseg_resize_flip", "siamseg_color_jitter")
GATES = (
    ("self_training", "source_only", 3.0),
    ("siamseg", "self_training", 2.0),
    ("siamseg_color_jitter", "siamseg_resize_flip", 1.0),
)


def run_arm(config_path: Path, arm: str, seed: int, output_root: Path) -> float:
    config = apply_ablation(load_config(config_path), arm)
    out = output_root / arm / f"seed{seed}"
    config = dataclasses.replace(config, run=dataclasses.replace(config.run, seed=seed, output_dir=str(out)))
    fit(config)
    report = json.loads((out / "eval" / "final.json").read_text(encoding="utf-8"))
    return 100.0 * float(report["miou"])


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=Path("configs/synthetic.yaml"))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--arms", nargs="+", default=list(ARMS), choices=ARMS)
    parser.add_argument("--output", type=Path, default=Path("runs/ablation"))
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )

    means: dict[str, float] = {}
    for arm in args.arms:
        scores = [run_arm(args.config, arm, seed, args.output) for seed in args.seeds]
        means[arm] = sum(scores) / len(scores)
        logger.info("%s: mIoU per seed %s", arm, ", ".join(f"{s:.2f}" for s in scores))

    print(f"{'arm':<24} {'mean mIoU':>10}")
    for arm, value in means.items():
        print(f"{arm:<24} {value:>10.2f}")

    failed = 0
    for better, worse, margin in GATES:
        if better not in means or worse not in means:
            continue
        delta = means[better] - means[worse]
        ok = delta >= margin
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {better} - {worse} = {delta:+.2f} (needs >= {margin:.1f})")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
