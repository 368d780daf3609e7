"""Command-line entry point: ``thermal-slam <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("thermal_slam")


def _cmd_run(args) -> int:
    from .config import PipelineConfig
    from .dataset import load_dataset
    from .pipeline import run_sequence, write_outputs

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.weighting:
        cfg.tracking.weighting = args.weighting
    manifest = load_dataset(args.dataset)
    for err in manifest.errors:
        log.warning("%s", err)
    traj, _, stats, slam = run_sequence(cfg, manifest)
    out = write_outputs(args.out, traj, slam, stats)
    (out / "config.toml").write_text(cfg.dumps())
    print(f"tracked {stats.tracked}/{stats.frames} frames ({stats.tracked_pct:.1f}%), "
          f"{stats.keyframes} keyframes, {stats.points} points -> {out}")
    return 0


def _cmd_preprocess(args) -> int:
    from .config import PipelineConfig
    from .dataset import load_dataset
    from .pipeline import prepare_image
    from .preproc import read_image, write_image

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    manifest = load_dataset(args.dataset, probe_depth=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for e in manifest.entries:
        if not e.path.exists():
            log.warning("skipping missing %s", e.path)
            continue
        write_image(prepare_image(read_image(e.path), cfg), out / (e.path.stem + ".png"))
        n += 1
    print(f"{n} frames through [{cfg.chain.describe()}] -> {out}")
    return 0


def _cmd_preprocess_eval(args) -> int:
    from .dataset import load_dataset
    from .evaluation import write_csv
    from .filter_eval import count_matches, load_chains, summary_rows

    chains = load_chains(args.chains)
    manifest = load_dataset(args.dataset)
    counts = count_matches(manifest, chains, stride=args.stride, max_features=args.max_features)
    rows = [{"chain": name, "frame_a": a, "frame_b": b, "matches": m} for name, items in counts.items() for a, b, m in items]
    write_csv(rows, args.out, ["chain", "frame_a", "frame_b", "matches"])
    summary = summary_rows(counts)
    if args.summary:
        write_csv(summary, args.summary)
    for r in summary:
        print(f"{r['chain']:>16}  pairs {r['pairs']:3d}  median {r['median']:.1f}  IQR [{r['q1']:.1f}, {r['q3']:.1f}]")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import ate_rmse, read_tum, tracked_percentage, write_csv

    est, gt = read_tum(args.est), read_tum(args.gt)
    ate = ate_rmse(est, gt, args.max_dt)
    pct = tracked_percentage(est, gt, args.max_dt)
    name = args.name or Path(args.est).stem
    write_csv([{"name": name, "ate": f"{ate:.9g}", "tracked_pct": f"{pct:.4g}"}], args.out)
    print(f"{name}: ATE {ate:.6f}  tracked {pct:.1f}%")
    return 0


def _cmd_synth(args) -> int:
    from dataclasses import replace

    from .synthetic import SyntheticSceneSpec, generate_synthetic

    spec = SyntheticSceneSpec.load(args.spec) if args.spec else SyntheticSceneSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.render:
        spec = replace(spec, render=True)
    generate_synthetic(spec, args.out)
    print(f"{spec.n_frames} frames, {spec.n_landmarks} landmarks -> {args.out}")
    return 0


def _cmd_import(args) -> int:
    from .dataset import import_image_folder

    m = import_image_folder(args.images, args.calib, args.out, args.stamp_scale, args.fps)
    print(f"{len(m)} frames -> {args.out}")
    return 0


def _cmd_ablation(args) -> int:
    from .ablation import rows, run_ablation, summarize
    from .config import PipelineConfig
    from .evaluation import write_csv

    cfg = PipelineConfig.load(args.config) if args.config else None
    runs = run_ablation(range(args.seed0, args.seed0 + args.seeds), config=cfg)
    write_csv(rows(runs), args.out)
    for s in summarize(runs).values():
        print(f"{s.weighting:>10}  tracked median {s.tracked_median:.1f} IQR {s.tracked_iqr:.1f}  ATE median {s.ate_median:.5f}")
    return 0


def _cmd_config(args) -> int:
    from .config import PipelineConfig

    text = PipelineConfig().dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thermal-slam", description="Sparse monocular SLAM for thermal image sequences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("run", help="track a dataset; write trajectory, map and stats")
    s.add_argument("--config")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--weighting", choices=("confidence", "uniform"))
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("preprocess", help="write filter-chain output for every frame")
    s.add_argument("--config")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_preprocess)

    s = sub.add_parser("preprocess-eval", help="match counts per filter chain over sampled frame pairs")
    s.add_argument("--dataset", required=True)
    s.add_argument("--chains", required=True)
    s.add_argument("--stride", type=int, default=10)
    s.add_argument("--max-features", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.add_argument("--summary")
    s.set_defaults(func=_cmd_preprocess_eval)

    s = sub.add_parser("evaluate", help="ATE and tracked percentage against ground truth")
    s.add_argument("--est", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--name")
    s.add_argument("--max-dt", type=float, default=0.02)
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--render", action="store_true", help="write rendered 16-bit frames instead of a feature sidecar")
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("import", help="convert a folder of frames into the dataset layout")
    s.add_argument("--images", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stamp-scale", type=float, default=1.0)
    s.add_argument("--fps", type=float)
    s.set_defaults(func=_cmd_import)

    s = sub.add_parser("ablation", help="confidence vs uniform weighting over seeded synthetic runs")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed0", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_ablation)

    s = sub.add_parser("config", help="print the default configuration")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"thermal-slam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
