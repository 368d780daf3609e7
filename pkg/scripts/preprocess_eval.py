"""Match counts per filter chain on a rendered, degraded synthetic sequence.

    python scripts/preprocess_eval.py --chains scripts/chains.toml --out pre
"""

import argparse
from pathlib import Path

from thermal_slam.dataset import load_dataset
from thermal_slam.evaluation import write_csv
from thermal_slam.filter_eval import count_matches, load_chains, summary_rows
from thermal_slam.synthetic import SyntheticSceneSpec, generate_synthetic


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--chains", default=str(Path(__file__).with_name("chains.toml")))
    ap.add_argument("--out", default="preprocess_eval")
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--stride", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    generate_synthetic(SyntheticSceneSpec(n_frames=args.frames, n_landmarks=400, render=True, seed=args.seed), out / "data")
    counts = count_matches(load_dataset(out / "data"), load_chains(args.chains), stride=args.stride)
    rows = summary_rows(counts)
    write_csv(rows, out / "summary.csv")
    for r in sorted(rows, key=lambda r: -r["median"]):
        print(f"{r['chain']:>16}: median {r['median']:.0f}  IQR [{r['q1']:.0f}, {r['q3']:.0f}] over {r['pairs']} pairs")


if __name__ == "__main__":
    main()
