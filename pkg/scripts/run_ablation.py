"""Confidence vs uniform weighting on the seeded burst-outlier scenes.

    python scripts/run_ablation.py --seeds 20 --out ablation.csv
"""

import argparse

from thermal_slam import ablation
from thermal_slam.evaluation import write_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()
    runs = ablation.run_ablation(range(args.seeds))
    write_csv(ablation.rows(runs), args.out)
    for s in ablation.summarize(runs).values():
        print(f"{s.weighting:>10}: tracked median {s.tracked_median:.1f}% IQR {s.tracked_iqr:.1f}  ATE median {s.ate_median:.4f}")


if __name__ == "__main__":
    main()
