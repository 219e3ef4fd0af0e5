#!/usr/bin/env python3
"""Component-flag sweep on the mixed benchmark config.

Six rows: each branch alone, last-token scoring on or off, and the two
fusion rules.  Rows differing only in the scoring variant share a training.
"""

import argparse
import os

from dualkd.evaluate import run_ablation, write_ablation_csv
from dualkd.presets import mixed_config

FLAG_COLS = ("use_encoder", "use_decoder", "use_last_token", "use_noisy_or")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--no-resume", action="store_true",
                    help="retrain even if checkpoints exist")
    args = ap.parse_args()

    cfg = mixed_config(args.out)
    rows = run_ablation(cfg, resume=not args.no_resume)

    print(f"{'enc':>3} {'dec':>3} {'tok':>3} {'nor':>3} "
          f"{'auroc':>7} {'ap':>7} {'f1max':>7}")
    for row in rows:
        flags = " ".join(f"{int(getattr(row, c)):>3}" for c in FLAG_COLS)
        m = row.report.mean
        print(f"{flags} {m['auroc']:>7.3f} {m['ap']:>7.3f} {m['f1max']:>7.3f}")

    path = os.path.join(args.out, "ablation.csv")
    write_ablation_csv(rows, path)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
