"""Match counts under competing filter chains.

Frame pairs ``(k, k + stride)`` are enhanced by each chain, run through the
raster detector and the mutual-nearest-neighbour matcher, and the number of
surviving correspondences is recorded per pair.

Chains file layout::

    [[chain]]
    name = "none"
    stages = []

    [[chain]]
    name = "default"
    stages = [{kind = "chambolle_tv", weight = 4.0}, {kind = "hist_eq", clip_threshold = 10000}]
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .config import PipelineConfig
from .dataset import DatasetManifest
from .features import DescriptorMatcher, SiftDetector, detect, match
from .pipeline import prepare_image
from .preproc import FilterChain, read_image


@dataclass
class NamedChain:
    name: str
    chain: FilterChain


def load_chains(path: str | Path) -> list[NamedChain]:
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    items = doc.get("chain")
    if not isinstance(items, list) or not items:
        raise ValueError(f"{path}: expected one or more [[chain]] tables")
    out = []
    for i, item in enumerate(items):
        if "name" not in item:
            raise ValueError(f"{path}: chain {i} has no name")
        out.append(NamedChain(str(item["name"]), FilterChain.from_list(item.get("stages", []))))
    names = [c.name for c in out]
    if len(set(names)) != len(names):
        raise ValueError(f"{path}: duplicate chain names")
    return out


def dump_chains(chains: list[NamedChain]) -> str:
    return tomli_w.dumps({"chain": [{"name": c.name, "stages": c.chain.to_list()} for c in chains]})


def frame_pairs(n: int, stride: int) -> list[tuple[int, int]]:
    if stride <= 0:
        raise ValueError("stride must be positive")
    return [(k, k + stride) for k in range(0, n - stride, stride)]


def count_matches(
    manifest: DatasetManifest,
    chains: list[NamedChain],
    stride: int = 10,
    max_features: int = 1000,
    lowe_ratio: float = 0.85,
) -> dict[str, list[tuple[int, int, int]]]:
    """Per chain, ``(frame_a, frame_b, matches)`` for every sampled pair."""
    detector = SiftDetector()
    matcher = DescriptorMatcher(lowe_ratio)
    pairs = frame_pairs(len(manifest), stride)
    needed = sorted({k for p in pairs for k in p})
    raw = {k: read_image(manifest.entries[k].path) for k in needed}
    out: dict[str, list[tuple[int, int, int]]] = {}
    for nc in chains:
        cfg = PipelineConfig(chain=nc.chain)
        feats = {k: detect(prepare_image(img, cfg), detector, max_features, frame_id=k) for k, img in raw.items()}
        out[nc.name] = [(a, b, len(match(feats[a], feats[b], matcher))) for a, b in pairs]
    return out


def summary_rows(counts: dict[str, list[tuple[int, int, int]]]) -> list[dict]:
    rows = []
    for name, items in counts.items():
        m = np.array([c for _, _, c in items], dtype=float)
        q1, med, q3 = np.percentile(m, [25, 50, 75]) if len(m) else (np.nan,) * 3
        rows.append({"chain": name, "pairs": len(m), "median": float(med), "q1": float(q1), "q3": float(q3)})
    return rows
