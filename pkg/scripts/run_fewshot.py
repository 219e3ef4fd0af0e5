#!/usr/bin/env python3
"""Few-shot sweep on the structural benchmark config.

Trains the run at shrinking per-class training-set sizes; mean image AUROC
should grow (within noise) as shots increase.  Shot subsets nest, so each
point adds samples to the previous one instead of redrawing.
"""

import argparse
import os

from dualkd.evaluate import run_fewshot, write_fewshot_csv
from dualkd.presets import few_shot_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/fewshot")
    ap.add_argument("--shots", default="1,2,4,8",
                    help="comma-separated per-class training sizes")
    ap.add_argument("--no-resume", action="store_true",
                    help="retrain even if checkpoints exist")
    args = ap.parse_args()

    shots = tuple(int(s) for s in args.shots.split(","))
    cfg = few_shot_config(args.out)
    points = run_fewshot(cfg, shots=shots, resume=not args.no_resume)

    print(f"{'shots':>5} {'mean_auroc':>11}")
    for p in points:
        print(f"{p.shots:>5} {p.mean_auroc:>11.3f}")

    path = os.path.join(args.out, "fewshot.csv")
    write_fewshot_csv(points, path)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
