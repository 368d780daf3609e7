"""SLAM map state: frames, keyframes, map points and the covisibility graph."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .features import FeatureSet
from .geometry import CameraIntrinsics, Pose, project_points


class MapError(ValueError):
    pass


@dataclass
class Frame:
    id: int
    timestamp: float
    features: FeatureSet
    pose: Pose | None = None

    @property
    def tracked(self) -> bool:
        return self.pose is not None


@dataclass
class KeyFrame:
    frame: Frame
    observations: dict[int, int] = field(default_factory=dict)
    point_of: np.ndarray = field(default=None)  # keypoint index -> point id or -1

    def __post_init__(self):
        if self.frame.pose is None:
            raise MapError("keyframe needs a pose")
        if self.point_of is None:
            self.point_of = np.full(len(self.frame.features), -1, dtype=np.int64)
            for pid, k in self.observations.items():
                self.point_of[k] = pid

    @property
    def id(self) -> int:
        return self.frame.id

    @property
    def pose(self) -> Pose:
        return self.frame.pose

    @property
    def features(self) -> FeatureSet:
        return self.frame.features

    @property
    def timestamp(self) -> float:
        return self.frame.timestamp


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    ref_descriptor: np.ndarray
    mean_view_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    depth_range: tuple[float, float] = (0.0, np.inf)
    n_predicted_visible: int = 0
    n_observed: int = 0
    observations: set[int] = field(default_factory=set)

    def mark_visible(self) -> None:
        self.n_predicted_visible += 1

    def mark_observed(self) -> None:
        self.n_observed += 1
        self.n_predicted_visible = max(self.n_predicted_visible, self.n_observed)

    @property
    def found_ratio(self) -> float:
        return self.n_observed / self.n_predicted_visible if self.n_predicted_visible else 1.0


@dataclass
class MapPolicy:
    covisibility_threshold: int = 15
    cull_ratio: float = 0.25
    min_predictions: int = 4
    max_view_angle_deg: float = 60.0
    depth_band: tuple[float, float] = (0.8, 1.25)
    kf_rotation_deg: float = 15.0
    kf_translation: float = 0.03
    rotation_metric: str = "euler"
    min_parallax_deg: float = 1.0
    reproj_threshold: float = 2.0
    scale_band: float = 5.0


class CovisibilityGraph:
    """Symmetric weighted adjacency over keyframe ids."""

    def __init__(self):
        self._adj: dict[int, dict[int, int]] = {}

    def add_node(self, kid: int) -> None:
        self._adj.setdefault(kid, {})

    def remove_node(self, kid: int) -> None:
        for other in self._adj.pop(kid, {}):
            self._adj[other].pop(kid, None)

    def set_edge(self, a: int, b: int, weight: int | None) -> None:
        if weight is None:
            self._adj[a].pop(b, None)
            self._adj[b].pop(a, None)
        else:
            self._adj[a][b] = weight
            self._adj[b][a] = weight

    def weight(self, a: int, b: int) -> int:
        return self._adj.get(a, {}).get(b, 0)

    def neighbors(self, kid: int) -> list[int]:
        """Neighbours by descending weight, then ascending id."""
        return sorted(self._adj.get(kid, {}), key=lambda o: (-self._adj[kid][o], o))

    @property
    def nodes(self) -> list[int]:
        return list(self._adj)

    def edges(self) -> dict[tuple[int, int], int]:
        return {(a, b): w for a, nb in self._adj.items() for b, w in nb.items() if a < b}


class Map:
    def __init__(self, camera: CameraIntrinsics, policy: MapPolicy | None = None):
        self.camera = camera
        self.policy = policy or MapPolicy()
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self.covisibility = CovisibilityGraph()
        self._next_point = 0

    # -- construction --------------------------------------------------------

    def new_point(self, X: np.ndarray, descriptor: np.ndarray) -> MapPoint:
        d = np.asarray(descriptor, dtype=float)
        p = MapPoint(self._next_point, np.asarray(X, dtype=float).copy(), d / max(np.linalg.norm(d), 1e-12))
        self.points[p.id] = p
        self._next_point += 1
        return p

    def add_observation(self, kid: int, pid: int, kp: int, update_graph: bool = False, count: bool = True) -> None:
        kf = self.keyframes[kid]
        pt = self.points[pid]
        if pid in kf.observations:
            raise MapError(f"point {pid} already observed in keyframe {kid}")
        if not 0 <= kp < len(kf.point_of):
            raise MapError(f"keypoint index {kp} out of range")
        if kf.point_of[kp] >= 0:
            raise MapError(f"keypoint {kp} of keyframe {kid} already assigned")
        kf.observations[pid] = kp
        kf.point_of[kp] = pid
        pt.observations.add(kid)
        if count:
            pt.mark_observed()
        if update_graph:
            self.update_connections(kid)

    def remove_observation(self, kid: int, pid: int) -> None:
        kf = self.keyframes[kid]
        kp = kf.observations.pop(pid)
        kf.point_of[kp] = -1
        self.points[pid].observations.discard(kid)

    def remove_point(self, pid: int) -> set[int]:
        pt = self.points.pop(pid)
        for kid in pt.observations:
            kf = self.keyframes[kid]
            kf.point_of[kf.observations.pop(pid)] = -1
        return set(pt.observations)

    def insert_keyframe(self, kf: KeyFrame) -> CovisibilityGraph:
        if kf.id in self.keyframes:
            raise MapError(f"duplicate keyframe id {kf.id}")
        if kf.frame.pose is None or not kf.frame.pose.is_orthonormal(1e-6):
            raise MapError("keyframe pose invalid")
        for pid, k in kf.observations.items():
            if pid not in self.points:
                raise MapError(f"keyframe observes unknown point {pid}")
            self.points[pid].observations.add(kf.id)
        self.keyframes[kf.id] = kf
        self.covisibility.add_node(kf.id)
        self.update_connections(kf.id)
        return self.covisibility

    # -- covisibility --------------------------------------------------------

    def shared_counts(self, kid: int) -> Counter:
        c: Counter = Counter()
        for pid in self.keyframes[kid].observations:
            c.update(self.points[pid].observations)
        c.pop(kid, None)
        return c

    def update_connections(self, kid: int) -> None:
        counts = self.shared_counts(kid)
        thr = self.policy.covisibility_threshold
        for other in self.keyframes:
            if other == kid:
                continue
            w = counts.get(other, 0)
            self.covisibility.set_edge(kid, other, w if w > thr else None)

    # -- statistics ------------------------------------------------------------

    def update_point_stats(self, pid: int) -> None:
        pt = self.points[pid]
        if not pt.observations:
            return
        centers = np.array([self.keyframes[k].pose.center() for k in sorted(pt.observations)])
        rays = pt.position - centers
        dist = np.linalg.norm(rays, axis=1)
        dist = np.maximum(dist, 1e-12)
        mean = (rays / dist[:, None]).mean(axis=0)
        pt.mean_view_dir = mean / max(np.linalg.norm(mean), 1e-12)
        lo, hi = self.policy.depth_band
        pt.depth_range = (lo * float(dist.min()), hi * float(dist.max()))

    def update_point_stats_many(self, pids) -> None:
        """Batched :meth:`update_point_stats`."""
        pairs = [(i, k) for i, p in enumerate(pids) for k in self.points[p].observations]
        if not pairs:
            return
        row = np.array([i for i, _ in pairs])
        centers = {k: self.keyframes[k].pose.center() for k in {k for _, k in pairs}}
        C = np.array([centers[k] for _, k in pairs])
        X = np.array([self.points[p].position for p in pids])
        rays = X[row] - C
        dist = np.maximum(np.linalg.norm(rays, axis=1), 1e-12)
        n = len(pids)
        mean = np.zeros((n, 3))
        np.add.at(mean, row, rays / dist[:, None])
        dmin = np.full(n, np.inf)
        dmax = np.zeros(n)
        np.minimum.at(dmin, row, dist)
        np.maximum.at(dmax, row, dist)
        norms = np.maximum(np.linalg.norm(mean, axis=1), 1e-12)
        lo, hi = self.policy.depth_band
        for i, p in enumerate(pids):
            if not np.isfinite(dmin[i]):
                continue
            pt = self.points[p]
            pt.mean_view_dir = mean[i] / norms[i]
            pt.depth_range = (lo * float(dmin[i]), hi * float(dmax[i]))

    def median_depth(self, kid: int) -> float | None:
        kf = self.keyframes[kid]
        if not kf.observations:
            return None
        X = np.array([self.points[p].position for p in kf.observations])
        z = kf.pose.transform(X)[:, 2]
        z = z[z > 0]
        return float(np.median(z)) if len(z) else None

    def point_array(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.fromiter(self.points, dtype=np.int64, count=len(self.points))
        X = np.array([self.points[i].position for i in ids]).reshape(-1, 3)
        return ids, X

    # -- policies ----------------------------------------------------------------

    def cull_points(self) -> list[int]:
        removed = cull_points(self.points, self.policy)
        touched: set[int] = set()
        for pid in removed:
            touched |= self.remove_point(pid)
        for kid in touched:
            self.update_connections(kid)
        return removed

    def rescale(self, s: float) -> None:
        """Scale the whole map about the origin; depth ranges follow."""
        for pt in self.points.values():
            pt.position = pt.position * s
            pt.depth_range = (pt.depth_range[0] * s, pt.depth_range[1] * s)
        for kf in self.keyframes.values():
            kf.frame.pose = Pose(kf.pose.R, kf.pose.t * s)

    def check_integrity(self) -> None:
        for kid, kf in self.keyframes.items():
            for pid, k in kf.observations.items():
                if pid not in self.points:
                    raise MapError(f"keyframe {kid} observes missing point {pid}")
                if kid not in self.points[pid].observations:
                    raise MapError(f"point {pid} lacks back-reference to keyframe {kid}")
                if kf.point_of[k] != pid:
                    raise MapError(f"keyframe {kid} reverse index mismatch at keypoint {k}")
            if np.count_nonzero(kf.point_of >= 0) != len(kf.observations):
                raise MapError(f"keyframe {kid} reverse index has stale entries")
        for pid, pt in self.points.items():
            for kid in pt.observations:
                if kid not in self.keyframes or pid not in self.keyframes[kid].observations:
                    raise MapError(f"point {pid} references keyframe {kid} without observation")
        thr = self.policy.covisibility_threshold
        for kid in self.keyframes:
            counts = self.shared_counts(kid)
            for other in self.keyframes:
                if other == kid:
                    continue
                w = counts.get(other, 0)
                expected = w if w > thr else 0
                if self.covisibility.weight(kid, other) != expected:
                    raise MapError(f"covisibility ({kid},{other}) is stale")


def visible_mask(
    X: np.ndarray,
    view_dirs: np.ndarray,
    depth_ranges: np.ndarray,
    pose: Pose,
    K: CameraIntrinsics,
    max_view_angle_deg: float = 60.0,
    margin: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized frustum, viewing-angle and depth-range test.

    Returns the visibility mask and the projected pixels.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    uv, z = project_points(K, pose, X)
    ray = X - pose.center()
    dist = np.linalg.norm(ray, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("ij,ij->i", ray, view_dirs) / dist
    ok = np.all(np.isfinite(X), axis=1) & (z > 0) & (dist > 0)
    ok &= K.in_bounds(np.where(ok[:, None], uv, -1.0), margin)
    ok &= cos > np.cos(np.deg2rad(max_view_angle_deg))
    ok &= (dist >= depth_ranges[:, 0]) & (dist <= depth_ranges[:, 1])
    return ok, uv


def check_visibility(
    point: MapPoint, pose: Pose, K: CameraIntrinsics, max_view_angle_deg: float = 60.0, margin: float = 0.0
) -> bool:
    """Frustum, viewing-angle and depth-range test; bumps the prediction counter when visible."""
    ok, _ = visible_mask(
        point.position[None], point.mean_view_dir[None], np.array([point.depth_range]), pose, K,
        max_view_angle_deg, margin,
    )
    if ok[0]:
        point.mark_visible()
    return bool(ok[0])


def cull_points(points: dict[int, MapPoint], policy: MapPolicy | None = None) -> list[int]:
    """Ids whose found/predicted ratio is below the cull ratio after the grace period."""
    policy = policy or MapPolicy()
    return [
        pid
        for pid, p in points.items()
        if p.n_predicted_visible >= policy.min_predictions
        and p.n_observed < policy.cull_ratio * p.n_predicted_visible
    ]


def rotation_difference_deg(Ra: np.ndarray, Rb: np.ndarray, metric: str = "euler") -> float:
    """Rotation between two orientations in degrees.

    ``euler``: norm of the per-axis Euler angles of the relative rotation.
    Differencing absolute Euler angles is avoided because it explodes near
    gimbal lock. ``geodesic``: angle of the relative rotation.
    """
    rel = Rotation.from_matrix(Ra @ Rb.T)
    if metric == "geodesic":
        return float(np.rad2deg(rel.magnitude()))
    if metric != "euler":
        raise ValueError(f"unknown rotation metric {metric!r}")
    return float(np.linalg.norm(rel.as_euler("xyz", degrees=True)))


def should_insert_keyframe(
    current: Pose,
    last_kf: Pose,
    median_depth: float,
    rotation_deg: float = 15.0,
    translation: float = 0.03,
    metric: str = "euler",
) -> bool:
    if median_depth <= 0:
        raise ValueError("median_depth must be positive")
    rot = rotation_difference_deg(current.R, last_kf.R, metric)
    disp = float(np.linalg.norm(current.center() - last_kf.center())) / median_depth
    return rot > rotation_deg or disp > translation


def validate_new_points(
    X: np.ndarray,
    Ta: Pose,
    uva: np.ndarray,
    Tb: Pose,
    uvb: np.ndarray,
    K: CameraIntrinsics,
    min_parallax_deg: float = 1.0,
    reproj_threshold: float = 2.0,
    median_depths: tuple[float | None, float | None] | None = None,
    scale_band: float = 5.0,
) -> np.ndarray:
    """Vectorized form of :func:`validate_new_point` over (N,3) candidates."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    ok = np.all(np.isfinite(X), axis=1)
    Xs = np.where(ok[:, None], X, 0.0)
    depths = []
    for T, uv in ((Ta, uva), (Tb, uvb)):
        proj, z = project_points(K, T, Xs)
        ok &= z > 0
        err = np.linalg.norm(np.where(ok[:, None], proj, 0.0) - np.asarray(uv, dtype=float).reshape(-1, 2), axis=1)
        ok &= err <= reproj_threshold
        depths.append(z)
    ra = Xs - Ta.center()
    rb = Xs - Tb.center()
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("ij,ij->i", ra, rb) / (np.linalg.norm(ra, axis=1) * np.linalg.norm(rb, axis=1))
    ok &= np.arccos(np.clip(np.nan_to_num(cos, nan=1.0), -1.0, 1.0)) >= np.deg2rad(min_parallax_deg)
    if median_depths is not None:
        for z, med in zip(depths, median_depths):
            if med is not None:
                ok &= (z >= med / scale_band) & (z <= med * scale_band)
    return ok


def validate_new_point(
    X: np.ndarray,
    views: list[tuple[Pose, np.ndarray]],
    K: CameraIntrinsics,
    min_parallax_deg: float = 1.0,
    reproj_threshold: float = 2.0,
    median_depths: list[float | None] | None = None,
    scale_band: float = 5.0,
) -> bool:
    """Depth, parallax, reprojection and scale-consistency test for a fresh point.

    With ``median_depths`` given, the point's depth in each view must lie within
    ``[median / scale_band, median * scale_band]`` of that keyframe.
    """
    (Ta, uva), (Tb, uvb) = views
    return bool(
        validate_new_points(
            np.asarray(X, dtype=float)[None], Ta, np.atleast_2d(uva), Tb, np.atleast_2d(uvb), K,
            min_parallax_deg, reproj_threshold, None if median_depths is None else tuple(median_depths), scale_band,
        )[0]
    )


def write_ply(points: np.ndarray, path: str | Path) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    n = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            body = lines[i + 1: i + 1 + n]
            return np.array([[float(v) for v in l.split()[:3]] for l in body]).reshape(-1, 3)
    raise ValueError(f"{path}: missing PLY header")
