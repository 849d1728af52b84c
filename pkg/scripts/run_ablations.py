#!/usr/bin/env python3
"""Run the three built-in ablation studies against one config.

Each study writes its own ablation.md: nms decodes one trained model with and
without suppression, freeze retrains with 0/1/2 frozen backbone units, and
hparams sweeps the two per-component learning-rate rows crossed with the
classification loss weight.
"""

import argparse
import sys
from pathlib import Path

from detkit.cli import main

REPO = Path(__file__).resolve().parents[1]
STUDIES = ("nms", "freeze", "hparams")


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config",
                        default=str(REPO / "projects/dab-detr/configs/toy_shapes.py"))
    parser.add_argument("--out", default="runs/ablations")
    parser.add_argument("--max-iter", type=int, default=400)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args(argv)

    worst = 0
    for study in STUDIES:
        code = main(["ablate", "--study", study, "--config", args.config,
                     "--out", str(Path(args.out) / study),
                     "--seed", str(args.seed),
                     f"train.max_iter={args.max_iter}",
                     "train.lr_milestones=()", "train.log_every=100"])
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(run())
