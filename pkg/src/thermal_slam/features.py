"""Keypoint detection and matching behind a small backend boundary.

Backends:

* ``SyntheticDetector`` / ``LandmarkMatcher`` replay projected landmarks from a
  sidecar file written by :mod:`thermal_slam.synthetic`.
* ``SiftDetector`` / ``DescriptorMatcher`` work on real rasters.
* ``TorchScriptDetector`` / ``TorchScriptMatcher`` run externally supplied
  serialized networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .preproc import ImageBuffer


class FeatureError(ValueError):
    pass


class BackendLoadError(RuntimeError):
    pass


@dataclass
class FeatureSet:
    """Keypoints (N,2) in pixels, scores (N,) in (0, 1], unit descriptors (N,D)."""

    xy: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    frame_id: int = 0
    landmark_ids: np.ndarray | None = None

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.xy)
        d = np.asarray(self.descriptors, dtype=np.float64)
        self.descriptors = d.reshape(n, -1) if d.size or n else d.reshape(0, d.shape[-1] if d.ndim == 2 else 0)
        if len(self.scores) != n or len(self.descriptors) != n:
            raise FeatureError("keypoint, score and descriptor counts differ")
        if n and (np.any(self.scores <= 0) or np.any(self.scores > 1)):
            raise FeatureError("scores must lie in (0, 1]")
        if n and self.descriptors.shape[1]:
            norms = np.linalg.norm(self.descriptors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise FeatureError("descriptors must be unit norm")
        if self.landmark_ids is not None:
            self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64).reshape(-1)
            if len(self.landmark_ids) != n:
                raise FeatureError("landmark id count differs from keypoint count")

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1] if self.descriptors.ndim == 2 else 0

    @classmethod
    def empty(cls, dim: int = 0, frame_id: int = 0) -> "FeatureSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, dim)), frame_id)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        lids = None if self.landmark_ids is None else self.landmark_ids[idx]
        return FeatureSet(self.xy[idx], self.scores[idx], self.descriptors[idx], self.frame_id, lids)


@dataclass
class MatchSet:
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != len(self.pairs):
                raise FeatureError("match score count differs from pair count")

    def __len__(self) -> int:
        return len(self.pairs)

    def is_one_to_one(self) -> bool:
        return all(len(np.unique(self.pairs[:, k])) == len(self.pairs) for k in (0, 1))

    def transposed(self) -> "MatchSet":
        return MatchSet(self.pairs[:, ::-1].copy(), None if self.scores is None else self.scores.copy())

    def check_indices(self, a: FeatureSet, b: FeatureSet) -> None:
        if len(self.pairs) and (
            self.pairs.min() < 0 or self.pairs[:, 0].max() >= len(a) or self.pairs[:, 1].max() >= len(b)
        ):
            raise FeatureError("match index out of range")


class DetectorBackend(Protocol):
    def detect(self, img: ImageBuffer | None, frame_id: int) -> FeatureSet: ...


class MatcherBackend(Protocol):
    def match(self, a: FeatureSet, b: FeatureSet) -> MatchSet: ...


def detect(img: ImageBuffer | None, backend: DetectorBackend, max_features: int, frame_id: int = 0) -> FeatureSet:
    """Run ``backend`` and keep the ``max_features`` highest-scoring keypoints."""
    if img is not None and img.depth != 8:
        raise FeatureError("detection expects an 8-bit image")
    if max_features < 0:
        raise FeatureError("max_features must be >= 0")
    feats = backend.detect(img, frame_id)
    order = np.argsort(-feats.scores, kind="stable")[:max_features]
    return feats.subset(order)


def match(a: FeatureSet, b: FeatureSet, backend: MatcherBackend) -> MatchSet:
    if len(a) and len(b) and a.dim != b.dim:
        raise FeatureError(f"descriptor dimensions differ: {a.dim} vs {b.dim}")
    if len(a) == 0 or len(b) == 0:
        return MatchSet()
    out = backend.match(a, b)
    out.check_indices(a, b)
    return out


# ---------------------------------------------------------------------------
# Descriptor matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DescriptorMatcher:
    """Mutual nearest neighbours on cosine similarity with a two-sided ratio test."""

    ratio: float = 0.85

    def match(self, a: FeatureSet, b: FeatureSet) -> MatchSet:
        sim = np.clip(a.descriptors @ b.descriptors.T, -1.0, 1.0)
        dist = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))
        ab = np.argmin(dist, axis=1)
        ba = np.argmin(dist, axis=0)
        ia = np.arange(len(a))
        mutual = ba[ab] == ia

        def ratio_ok(d: np.ndarray) -> np.ndarray:
            if d.shape[1] < 2:
                return np.ones(d.shape[0], dtype=bool)
            two = np.partition(d, 1, axis=1)[:, :2]
            return two[:, 0] < self.ratio * two[:, 1]

        ok = mutual & ratio_ok(dist) & ratio_ok(dist.T)[ab]
        pairs = np.stack([ia[ok], ab[ok]], axis=1)
        return MatchSet(pairs, sim[ia[ok], ab[ok]])


def match_descriptors_to_points(
    projected: np.ndarray,
    point_descriptors: np.ndarray,
    features: FeatureSet,
    candidates: np.ndarray | None = None,
    radius: float = 8.0,
    sim_threshold: float = 0.7,
) -> list[tuple[int, int]]:
    """Assign projected map points to nearby unmatched keypoints.

    ``projected`` is (P,2) pixels and ``point_descriptors`` (P,D). Only keypoints
    flagged in ``candidates`` (default all) are eligible. Assignment is greedy
    by descending similarity, ties going to the lower keypoint index, and is
    one-to-one. Returns ``(row in projected, keypoint index)`` pairs.
    """
    projected = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    if len(projected) == 0 or len(features) == 0:
        return []
    eligible = np.ones(len(features), dtype=bool) if candidates is None else np.asarray(candidates, dtype=bool)
    kp_idx = np.flatnonzero(eligible)
    if len(kp_idx) == 0:
        return []
    diff = projected[:, None, :] - features.xy[kp_idx][None, :, :]
    near = np.einsum("pkd,pkd->pk", diff, diff) <= radius * radius
    sim = point_descriptors @ features.descriptors[kp_idx].T
    ok = near & (sim >= sim_threshold)
    pi, ki = np.nonzero(ok)
    if len(pi) == 0:
        return []
    s = sim[pi, ki]
    order = np.lexsort((pi, kp_idx[ki], -s))
    used_p: set[int] = set()
    used_k: set[int] = set()
    out = []
    for o in order:
        p, k = int(pi[o]), int(kp_idx[ki[o]])
        if p in used_p or k in used_k:
            continue
        used_p.add(p)
        used_k.add(k)
        out.append((p, k))
    out.sort()
    return out


# ---------------------------------------------------------------------------
# Synthetic provider
# ---------------------------------------------------------------------------

def landmark_descriptors(landmark_ids: np.ndarray, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Deterministic unit descriptor per landmark id."""
    ids = np.asarray(landmark_ids, dtype=np.int64).reshape(-1)
    out = np.empty((len(ids), dim))
    for i, lid in enumerate(ids):
        v = np.random.default_rng([seed, int(lid) & 0x7FFFFFFF]).standard_normal(dim)
        out[i] = v / np.linalg.norm(v)
    return out


@dataclass
class SyntheticDetector:
    """Replays per-frame keypoints from a sidecar table.

    ``frames`` maps frame id to ``(xy, scores, landmark_ids)``. Descriptors are
    a deterministic function of the landmark id.
    """

    frames: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]
    descriptor_dim: int = 32
    seed: int = 0
    _cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_file(cls, path: str | Path, descriptor_dim: int = 32, seed: int = 0) -> "SyntheticDetector":
        """Read an (M,5) table with rows ``frame, x, y, score, landmark``."""
        path = Path(path)
        if not path.exists():
            raise BackendLoadError(f"feature sidecar not found: {path}")
        table = np.load(path).reshape(-1, 5)
        fid = table[:, 0].astype(np.int64)
        frames = {}
        bounds = np.flatnonzero(np.diff(fid)) + 1
        for chunk in np.split(np.arange(len(fid)), bounds):
            if len(chunk):
                rows = table[chunk]
                frames[int(fid[chunk[0]])] = (rows[:, 1:3], rows[:, 3], rows[:, 4].astype(np.int64))
        return cls(frames, descriptor_dim, seed)

    def _descriptors(self, lids: np.ndarray) -> np.ndarray:
        missing = [int(l) for l in np.unique(lids) if int(l) not in self._cache]
        if missing:
            for l, d in zip(missing, landmark_descriptors(np.array(missing), self.descriptor_dim, self.seed)):
                self._cache[l] = d
        if len(lids) == 0:
            return np.zeros((0, self.descriptor_dim))
        return np.stack([self._cache[int(l)] for l in lids])

    def detect(self, img: ImageBuffer | None, frame_id: int) -> FeatureSet:
        if frame_id not in self.frames:
            return FeatureSet.empty(self.descriptor_dim, frame_id)
        xy, sc, lid = self.frames[frame_id]
        return FeatureSet(xy, sc, self._descriptors(lid), frame_id, lid)


@dataclass(frozen=True)
class LandmarkMatcher:
    """Pairs keypoints that carry the same landmark id."""

    def match(self, a: FeatureSet, b: FeatureSet) -> MatchSet:
        if a.landmark_ids is None or b.landmark_ids is None:
            raise FeatureError("landmark matcher needs landmark ids on both sides")
        la, lb = a.landmark_ids, b.landmark_ids
        _, ia = np.unique(la, return_index=True)
        _, ib = np.unique(lb, return_index=True)
        common, pa, pb = np.intersect1d(la[ia], lb[ib], return_indices=True)
        keep = common >= 0
        pairs = np.stack([ia[pa][keep], ib[pb][keep]], axis=1)
        pairs = pairs[np.argsort(pairs[:, 0], kind="stable")]
        return MatchSet(pairs, np.ones(len(pairs)))


# ---------------------------------------------------------------------------
# Raster backend
# ---------------------------------------------------------------------------

@dataclass
class SiftDetector:
    """Scale-invariant blob detector with descriptors normalized to unit length.

    Scores are responses divided by the frame's strongest response.
    """

    contrast_threshold: float = 0.02
    n_features: int = 2000

    def __post_init__(self):
        import cv2

        self._sift = cv2.SIFT_create(nfeatures=self.n_features, contrastThreshold=self.contrast_threshold)

    def detect(self, img: ImageBuffer | None, frame_id: int) -> FeatureSet:
        if img is None:
            raise FeatureError("raster detector needs an image")
        kps, desc = self._sift.detectAndCompute(img.data, None)
        if not kps:
            return FeatureSet.empty(128, frame_id)
        xy = np.array([k.pt for k in kps])
        resp = np.array([k.response for k in kps], dtype=np.float64)
        scores = np.clip(resp / max(resp.max(), 1e-12), 1e-6, 1.0)
        desc = desc.astype(np.float64)
        desc /= np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
        return FeatureSet(xy, scores, desc, frame_id)


# ---------------------------------------------------------------------------
# Serialized-network backend
# ---------------------------------------------------------------------------

def _load_torchscript(path: str | Path):
    path = Path(path)
    if not path.is_file():
        raise BackendLoadError(f"model file not found: {path}")
    try:
        import torch
    except ImportError as exc:
        raise BackendLoadError("torch is required for serialized-network backends") from exc
    try:
        module = torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:  # torch raises several unrelated types here
        raise BackendLoadError(f"cannot load {path}: {exc}") from exc
    module.eval()
    return torch, module


class TorchScriptDetector:
    """Network taking a (1,1,H,W) float image in [0,1] and returning
    ``(keypoints (N,2), scores (N,), descriptors (N,D))``."""

    def __init__(self, path: str | Path):
        self._torch, self._module = _load_torchscript(path)

    def detect(self, img: ImageBuffer | None, frame_id: int) -> FeatureSet:
        if img is None:
            raise FeatureError("network detector needs an image")
        torch = self._torch
        x = torch.from_numpy(img.data.astype(np.float32) / 255.0)[None, None]
        with torch.no_grad():
            kp, sc, desc = self._module(x)
        desc = desc.double().numpy()
        desc /= np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
        scores = np.clip(sc.double().numpy(), 1e-6, 1.0)
        return FeatureSet(kp.double().numpy(), scores, desc, frame_id)


class TorchScriptMatcher:
    """Network taking two descriptor tensors and returning ``(pairs (M,2), scores (M,))``."""

    def __init__(self, path: str | Path):
        self._torch, self._module = _load_torchscript(path)

    def match(self, a: FeatureSet, b: FeatureSet) -> MatchSet:
        torch = self._torch
        with torch.no_grad():
            pairs, scores = self._module(
                torch.from_numpy(a.descriptors.astype(np.float32)), torch.from_numpy(b.descriptors.astype(np.float32))
            )
        out = MatchSet(pairs.long().numpy(), scores.double().numpy())
        if not out.is_one_to_one():
            raise FeatureError("network matcher returned a non one-to-one matching")
        return out
