#!/usr/bin/env python3
"""Train every project config briefly, then emit one comparison table.

The default 300-iteration budget keeps the whole roster under a few minutes
on a laptop CPU; raise --max-iter for scores closer to each model's ceiling.
AP columns come from evaluating each trained checkpoint on its val split.
"""

import argparse
import sys
from pathlib import Path

from detkit.cli import main

REPO = Path(__file__).resolve().parents[1]


def roster() -> list[Path]:
    return sorted(REPO.glob("projects/*/configs/toy_shapes.py"))


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/roster")
    parser.add_argument("--max-iter", type=int, default=300)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    args = parser.parse_args(argv)

    out = Path(args.out)
    configs, checkpoints = [], []
    for config in roster():
        run_dir = out / config.parent.parent.name
        code = main(["train", "--config", str(config), "--out", str(run_dir),
                     "--seed", str(args.seed),
                     f"train.max_iter={args.max_iter}",
                     "train.lr_milestones=()", "train.log_every=50"])
        if code != 0:
            print(f"training failed for {config}; it will appear as a failure row",
                  file=sys.stderr)
        configs.append(str(config))
        checkpoints.append(str(run_dir / "final.ckpt"))

    table = out / ("benchmark.md" if args.format == "markdown" else "benchmark.csv")
    return main(["benchmark", "--configs", *configs, "--checkpoints", *checkpoints,
                 "--out", str(table), "--format", args.format,
                 "--seed", str(args.seed)])


if __name__ == "__main__":
    sys.exit(run())
