"""Per-frame SLAM loop: initialization, tracking, keyframes, mapping and local BA."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .dataset import DatasetManifest
from .evaluation import Trajectory, write_tum
from .features import (
    BackendLoadError,
    DescriptorMatcher,
    FeatureSet,
    LandmarkMatcher,
    SiftDetector,
    SyntheticDetector,
    TorchScriptDetector,
    TorchScriptMatcher,
    detect,
    match,
    match_descriptors_to_points,
)
from .geometry import (
    GeometryError,
    Pose,
    essential_from_pose,
    estimate_essential_robust,
    project_points,
    recover_pose,
    sampson_distance,
    so3_exp,
    so3_log,
    triangulate_points,
)
from .mapping import (
    Frame,
    KeyFrame,
    Map,
    should_insert_keyframe,
    validate_new_points,
    visible_mask,
    write_ply,
)
from .optim import FactorGraphProblem, Mode, ReprojectionFactor, full_ba_init, solve
from .preproc import ImageBuffer, apply_chain, read_image, to_8bit

log = logging.getLogger(__name__)


class Phase(str, enum.Enum):
    AWAITING_INIT = "awaiting_init"
    TRACKING = "tracking"
    LOST = "lost"


def pose_power(T: Pose, a: float) -> Pose:
    """Scale a (small) relative motion by ``a`` along its rotation vector."""
    return Pose(so3_exp(a * so3_log(T.R)), a * T.t)


@dataclass
class TrackResult:
    pose: Pose
    matches: dict[int, int]  # point id -> keypoint index
    cost: float = 0.0


@dataclass
class PipelineStats:
    frames: int = 0
    tracked: int = 0
    keyframes: int = 0
    points: int = 0
    mean_cost: float = 0.0
    lost_at: int | None = None

    @property
    def tracked_pct(self) -> float:
        return 100.0 * self.tracked / self.frames if self.frames else 0.0

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "tracked": self.tracked,
            "tracked_pct": self.tracked_pct,
            "keyframes": self.keyframes,
            "points": self.points,
            "mean_cost": self.mean_cost,
            "lost_at": self.lost_at,
        }


class Slam:
    def __init__(self, config: PipelineConfig, camera, matcher):
        self.config = config
        self.camera = camera
        self.matcher = matcher
        self.map = Map(camera, config.map)
        self.phase = Phase.AWAITING_INIT
        self.trajectory: list[tuple[float, Pose | None]] = []
        self.ref_kf: int | None = None
        self.costs: list[float] = []
        self.events: list[str] = []
        self._init_ref: Frame | None = None
        self._pending: list[Frame] = []
        self._last_pose: Pose | None = None
        self._last_index = -1
        self._velocity = Pose.identity()
        self._lost_count = 0
        self.lost_at: int | None = None

    # -- helpers ---------------------------------------------------------------

    def _note(self, msg: str) -> None:
        self.events.append(msg)
        log.info(msg)

    def _weight(self, score: float) -> float:
        return float(score) if self.config.tracking.weighting == "confidence" else 1.0

    @property
    def frames_seen(self) -> int:
        return len(self.trajectory)

    @property
    def frames_tracked(self) -> int:
        return sum(p is not None for _, p in self.trajectory)

    def process(self, frame: Frame) -> Pose | None:
        if frame.id != len(self.trajectory):
            raise ValueError(f"frame ids must be consecutive, got {frame.id} at {len(self.trajectory)}")
        self.trajectory.append((frame.timestamp, None))
        if self.phase is Phase.AWAITING_INIT:
            self.try_initialize(frame)
        elif self.phase is Phase.TRACKING:
            self.track_frame(frame)
        return self.trajectory[frame.id][1]

    def skip(self, timestamp: float, reason: str) -> None:
        """Record an unreadable frame as untracked."""
        self._note(f"frame {len(self.trajectory)} skipped: {reason}")
        self.trajectory.append((timestamp, None))
        if self.phase is Phase.TRACKING:
            self._miss(len(self.trajectory) - 1)

    # -- initialization ----------------------------------------------------------

    def try_initialize(self, frame: Frame) -> None:
        tc = self.config.tracking
        ref = self._init_ref
        if ref is None or len(ref.features) < tc.min_init_matches:
            self._init_ref, self._pending = frame, []
            return
        m = match(ref.features, frame.features, self.matcher)
        if len(m) >= tc.min_init_matches and self._initialize(ref, frame, m.pairs):
            return
        if frame.timestamp - ref.timestamp > tc.max_init_gap:
            self._note(f"init reference advanced {ref.id} -> {frame.id} ({len(m)} matches)")
            self._init_ref, self._pending = frame, []
        else:
            self._pending.append(frame)

    def _initialize(self, ref: Frame, cur: Frame, pairs: np.ndarray) -> bool:
        K, cfg, tc = self.camera, self.config, self.config.tracking
        ia, ib = pairs[:, 0], pairs[:, 1]
        uva, uvb = ref.features.xy[ia], cur.features.xy[ib]
        xa, xb = K.normalized_from_pixel(uva), K.normalized_from_pixel(uvb)
        g = cfg.geometry
        try:
            est = estimate_essential_robust(
                xa, xb, focal=K.fx, threshold_px=g.ransac_threshold_px, max_iters=g.ransac_max_iters,
                sigmas_px=g.magsac_sigmas_px, confidence=g.ransac_confidence, lo_iters=g.lo_iters,
                refine_starts=g.refine_starts,
                seed=tc.seed + cur.id,
            )
            T_ba, front = recover_pose(est, xa, xb)
        except GeometryError as exc:
            self._note(f"init {ref.id}-{cur.id} declined: {exc}")
            return False
        Ta = Pose.identity()
        sel = np.flatnonzero(front)
        X, parallax = triangulate_points(Ta, T_ba, uva[sel], uvb[sel], K)
        ok = validate_new_points(
            X, Ta, uva[sel], T_ba, uvb[sel], K, cfg.map.min_parallax_deg, cfg.map.reproj_threshold
        )
        if ok.sum() < tc.min_init_matches:
            self._note(f"init {ref.id}-{cur.id} declined: {int(ok.sum())} valid points")
            return False
        if np.rad2deg(np.median(parallax[ok])) < tc.min_init_parallax_deg:
            self._note(f"init {ref.id}-{cur.id} declined: low parallax")
            return False
        sel, X = sel[ok], X[ok]

        problem = FactorGraphProblem(K)
        problem.add_pose(0, Ta, fixed=True)
        problem.add_pose(1, T_ba)
        for j, s in enumerate(sel):
            problem.add_point(j, X[j])
            for pid_pose, feats, idx in ((0, ref.features, ia[s]), (1, cur.features, ib[s])):
                problem.add_factor(
                    ReprojectionFactor(pid_pose, j, feats.xy[idx], self._weight(feats.scores[idx]), cfg.optim.huber_delta)
                )
        report = full_ba_init(problem, 0, 1, cfg.optim)
        if not report.converged:
            self._note(f"init {ref.id}-{cur.id} declined: BA did not converge")
            return False
        bad = {problem.factors[k].point_id for k in report.outliers}
        keep = [j for j in range(len(sel)) if j not in bad]
        if len(keep) < tc.min_init_matches:
            self._note(f"init {ref.id}-{cur.id} declined: {len(keep)} points after BA")
            return False

        ref.pose, cur.pose = problem.poses[0], problem.poses[1]
        kfa, kfb = KeyFrame(ref), KeyFrame(cur)
        self.map.insert_keyframe(kfa)
        self.map.insert_keyframe(kfb)
        for j in keep:
            s = sel[j]
            mp = self.map.new_point(problem.points[j], ref.features.descriptors[ia[s]])
            self.map.add_observation(kfa.id, mp.id, int(ia[s]))
            self.map.add_observation(kfb.id, mp.id, int(ib[s]))
            self.map.update_point_stats(mp.id)
        self.map.update_connections(kfa.id)
        self.map.update_connections(kfb.id)
        self.costs.append(report.final_cost)
        self._note(f"initialized with frames {ref.id}-{cur.id}: {len(keep)} points")

        self.phase = Phase.TRACKING
        self.ref_kf = kfb.id
        self.trajectory[ref.id] = (ref.timestamp, ref.pose)
        self.trajectory[cur.id] = (cur.timestamp, cur.pose)
        gap = cur.id - ref.id
        step = pose_power(cur.pose @ ref.pose.inverse(), 1.0 / gap)
        # frames between the two initialization views are localized after the fact
        for f in self._pending:
            if ref.id < f.id < cur.id:
                pred = pose_power(step, f.id - ref.id) @ ref.pose
                res = self._localize(f, pred, kfa)
                if res is not None and len(res.matches) >= tc.min_track_inliers:
                    self.trajectory[f.id] = (f.timestamp, res.pose)
        self._pending = []
        self._velocity = step
        self._last_pose = cur.pose
        self._last_index = cur.id
        return True

    # -- tracking ------------------------------------------------------------------

    def _motion_ba(self, frame: Frame, pose: Pose, matches: dict[int, int]) -> tuple[Pose, dict[int, int], float]:
        cfg = self.config
        problem = FactorGraphProblem(self.camera)
        problem.add_pose(0, pose)
        pids = list(matches)
        for pid in pids:
            problem.add_point(pid, self.map.points[pid].position, fixed=True)
            k = matches[pid]
            problem.add_factor(
                ReprojectionFactor(
                    0, pid, frame.features.xy[k], self._weight(frame.features.scores[k]), cfg.optim.huber_delta
                )
            )
        report = solve(problem, Mode.MOTION_ONLY, cfg.optim)
        if not report.converged:
            return pose, {}, np.inf
        new = problem.poses[0]
        X = np.array([self.map.points[p].position for p in pids]).reshape(-1, 3)
        obs = np.array([frame.features.xy[matches[p]] for p in pids]).reshape(-1, 2)
        w = np.array([self._weight(frame.features.scores[matches[p]]) for p in pids])
        uv, z = project_points(self.camera, new, X)
        s = w**2 * np.sum((uv - obs) ** 2, axis=1)
        outl = set(report.outliers)
        inl = {p: matches[p] for i, p in enumerate(pids) if i not in outl and z[i] > 0 and s[i] <= cfg.optim.chi2_gate}
        return new, inl, report.final_cost

    def _localize(self, frame: Frame, pred: Pose, kf: KeyFrame) -> TrackResult | None:
        cfg = self.config
        feats = frame.features
        if len(feats) == 0 or not self.map.points:
            return None
        matches: dict[int, int] = {}
        m = match(kf.features, feats, self.matcher)
        for i, j in m.pairs:
            pid = int(kf.point_of[i])
            if pid >= 0 and pid in self.map.points:
                matches[pid] = int(j)
        pose = pred
        if len(matches) >= 6:
            pose, matches, _ = self._motion_ba(frame, pose, matches)

        ids, X = self.map.point_array()
        dirs = np.array([self.map.points[i].mean_view_dir for i in ids]).reshape(-1, 3)
        ranges = np.array([self.map.points[i].depth_range for i in ids]).reshape(-1, 2)
        vis, uv = visible_mask(X, dirs, ranges, pose, self.camera, cfg.map.max_view_angle_deg)
        for i in np.flatnonzero(vis):
            self.map.points[int(ids[i])].mark_visible()
        cand = vis & ~np.isin(ids, list(matches))
        free = np.ones(len(feats), dtype=bool)
        free[list(matches.values())] = False
        ci = np.flatnonzero(cand)
        if len(ci):
            desc = np.array([self.map.points[int(ids[i])].ref_descriptor for i in ci])
            for row, k in match_descriptors_to_points(
                uv[ci], desc, feats, free, cfg.features.search_radius, cfg.features.sim_threshold
            ):
                matches[int(ids[ci[row]])] = k
        if len(matches) < 6:
            return None
        pose, matches, cost = self._motion_ba(frame, pose, matches)
        return TrackResult(pose, matches, cost)

    def _miss(self, index: int) -> None:
        self._lost_count += 1
        if self._lost_count >= self.config.tracking.lost_patience:
            self.phase = Phase.LOST
            self.lost_at = index
            self._note(f"tracking lost at frame {index}; no relocalization, remaining frames untracked")

    def track_frame(self, frame: Frame) -> None:
        tc = self.config.tracking
        gap = frame.id - self._last_index
        pred = pose_power(self._velocity, gap) @ self._last_pose
        kf = self.map.keyframes[self.ref_kf]
        res = self._localize(frame, pred, kf)
        if res is None or len(res.matches) < tc.min_track_inliers:
            n = 0 if res is None else len(res.matches)
            self._note(f"frame {frame.id} untracked ({n} inliers)")
            self._miss(frame.id)
            return
        if self._lost_count:
            self._note(f"frame {frame.id} recovered after {self._lost_count} untracked frames")
        self._lost_count = 0
        frame.pose = res.pose
        self.trajectory[frame.id] = (frame.timestamp, res.pose)
        for pid in res.matches:
            self.map.points[pid].mark_observed()
        self._velocity = pose_power(res.pose @ self._last_pose.inverse(), 1.0 / gap)
        self._last_pose = res.pose
        self._last_index = frame.id

        med = self.map.median_depth(kf.id)
        mp = self.config.map
        if med and should_insert_keyframe(res.pose, kf.pose, med, mp.kf_rotation_deg, mp.kf_translation, mp.rotation_metric):
            new_kf = KeyFrame(frame)
            self.map.insert_keyframe(new_kf)
            for pid, k in res.matches.items():
                self.map.add_observation(new_kf.id, pid, k, count=False)
            self.map.update_connections(new_kf.id)
            self.expand_map(new_kf)
            self.ref_kf = new_kf.id
            self._last_pose = new_kf.pose
            self.trajectory[frame.id] = (frame.timestamp, new_kf.pose)

    # -- mapping ---------------------------------------------------------------------

    def _neighbors(self, kf: KeyFrame) -> list[int]:
        nb = self.map.covisibility.neighbors(kf.id)[: self.config.tracking.local_ba_window]
        if not nb:
            older = [k for k in self.map.keyframes if k != kf.id]
            nb = older[-2:]
        return nb

    def expand_map(self, kf: KeyFrame) -> int:
        """Fuse and triangulate against covisible keyframes, cull, then local BA."""
        cfg, K, mp = self.config, self.camera, self.config.map
        touched = set(kf.observations)
        created = 0
        neighbors = self._neighbors(kf)
        med_kf = self.map.median_depth(kf.id)
        for nid in neighbors:
            nb = self.map.keyframes[nid]
            m = match(nb.features, kf.features, self.matcher)
            if len(m) == 0:
                continue
            i, j = m.pairs[:, 0], m.pairs[:, 1]
            pn, pk = nb.point_of[i], kf.point_of[j]

            # fuse existing points into the new keyframe
            for a, b, pid in zip(i[(pn >= 0) & (pk < 0)], j[(pn >= 0) & (pk < 0)], pn[(pn >= 0) & (pk < 0)]):
                pid = int(pid)
                if pid in kf.observations or kf.point_of[b] >= 0:
                    continue
                uv, z = project_points(K, kf.pose, self.map.points[pid].position[None])
                w = self._weight(kf.features.scores[b])
                if z[0] > 0 and w**2 * np.sum((uv[0] - kf.features.xy[b]) ** 2) <= cfg.optim.chi2_gate:
                    self.map.add_observation(kf.id, pid, int(b))
                    touched.add(pid)

            new = (pn < 0) & (kf.point_of[j] < 0)
            if not new.any():
                continue
            a, b = i[new], j[new]
            uva, uvb = nb.features.xy[a], kf.features.xy[b]
            E = essential_from_pose(kf.pose @ nb.pose.inverse())
            d = sampson_distance(E, K.normalized_from_pixel(uva), K.normalized_from_pixel(uvb))
            gate = d <= cfg.geometry.epipolar_threshold_px / K.fx
            if not gate.any():
                continue
            a, b, uva, uvb = a[gate], b[gate], uva[gate], uvb[gate]
            X, _ = triangulate_points(nb.pose, kf.pose, uva, uvb, K)
            ok = validate_new_points(
                X, nb.pose, uva, kf.pose, uvb, K, mp.min_parallax_deg, mp.reproj_threshold,
                (self.map.median_depth(nid), med_kf), mp.scale_band,
            )
            for x, ka, kb in zip(X[ok], a[ok], b[ok]):
                if kf.point_of[kb] >= 0 or nb.point_of[ka] >= 0:
                    continue
                p = self.map.new_point(x, kf.features.descriptors[kb])
                self.map.add_observation(nid, p.id, int(ka))
                self.map.add_observation(kf.id, p.id, int(kb))
                touched.add(p.id)
                created += 1
        self.map.update_point_stats_many([p for p in touched if p in self.map.points])
        self.map.update_connections(kf.id)
        for nid in neighbors:
            self.map.update_connections(nid)
        removed = self.map.cull_points()
        self.local_ba(kf)
        self._note(f"keyframe {kf.id}: +{created} points, -{len(removed)} culled, {len(self.map.points)} total")
        return created

    def local_ba(self, kf: KeyFrame) -> None:
        cfg = self.config
        local = [kf.id] + self.map.covisibility.neighbors(kf.id)[: cfg.tracking.local_ba_window]
        local_set = set(local)
        pts = sorted({p for k in local for p in self.map.keyframes[k].observations})
        if not pts:
            return
        shared: dict[int, int] = {}
        for p in pts:
            for k in self.map.points[p].observations:
                if k not in local_set:
                    shared[k] = shared.get(k, 0) + 1
        # the most strongly connected outside observers anchor the window
        ranked = sorted(shared, key=lambda k: (-shared[k], -k))
        anchors = sorted(ranked[: cfg.tracking.local_ba_window])
        problem = FactorGraphProblem(self.camera)
        first = min(self.map.keyframes)
        fixed = set(anchors)
        if not fixed or first in local_set:
            fixed.add(first if first in local_set else min(local))
        for k in sorted(local_set | set(anchors)):
            problem.add_pose(k, self.map.keyframes[k].pose, fixed=k in fixed)
        for p in pts:
            problem.add_point(p, self.map.points[p].position)
        index = []
        for k in sorted(local_set | set(anchors)):
            kfk = self.map.keyframes[k]
            for p, idx in kfk.observations.items():
                if p in problem.points:
                    problem.add_factor(
                        ReprojectionFactor(
                            k, p, kfk.features.xy[idx], self._weight(kfk.features.scores[idx]), cfg.optim.huber_delta
                        )
                    )
                    index.append((k, p))
        report = solve(problem, Mode.LOCAL, cfg.optim)
        if not report.converged:
            self._note(f"local BA at keyframe {kf.id} did not converge; keeping previous state")
            return
        for k in local_set - fixed:
            self.map.keyframes[k].frame.pose = problem.poses[k]
            if self.trajectory[k][1] is not None:
                self.trajectory[k] = (self.trajectory[k][0], problem.poses[k])
        for p in pts:
            self.map.points[p].position = problem.points[p]
        dirty = set()
        for f in report.outliers:
            k, p = index[f]
            if p in self.map.points and p in self.map.keyframes[k].observations:
                self.map.remove_observation(k, p)
                dirty.add(k)
                if len(self.map.points[p].observations) < 2:
                    dirty |= self.map.remove_point(p)
        for k in dirty:
            self.map.update_connections(k)
        self.map.update_point_stats_many([p for p in pts if p in self.map.points])
        self.costs.append(report.final_cost)

    # -- results -----------------------------------------------------------------

    def stats(self) -> PipelineStats:
        return PipelineStats(
            frames=self.frames_seen,
            tracked=self.frames_tracked,
            keyframes=len(self.map.keyframes),
            points=len(self.map.points),
            mean_cost=float(np.mean(self.costs)) if self.costs else 0.0,
            lost_at=self.lost_at,
        )

    def estimated_trajectory(self) -> Trajectory:
        rows = [(ts, p) for ts, p in self.trajectory if p is not None]
        return Trajectory.from_poses([r[0] for r in rows], [r[1] for r in rows])


# ---------------------------------------------------------------------------
# Backends and sequence runner
# ---------------------------------------------------------------------------

def build_backends(config: PipelineConfig, manifest: DatasetManifest | None = None):
    """Detector and matcher named by the feature config.

    A missing model file for the network backend falls back to the raster
    backend with a logged notice.
    """
    fc = config.features
    backend = fc.backend
    detector = matcher = None
    if backend == "torchscript":
        try:
            detector = TorchScriptDetector(fc.detector_model)
            matcher = TorchScriptMatcher(fc.matcher_model) if fc.matcher_model else DescriptorMatcher(fc.lowe_ratio)
        except BackendLoadError as exc:
            log.warning("network backend unavailable (%s); using raster fallback", exc)
            backend = "sift"
    if backend == "synthetic":
        path = manifest.features if manifest is not None else None
        if path is None:
            raise BackendLoadError("synthetic backend needs a features.npy sidecar in the dataset")
        detector = SyntheticDetector.from_file(path, fc.descriptor_dim, config.tracking.seed)
    elif backend == "sift":
        detector = SiftDetector()
    elif detector is None:
        raise BackendLoadError(f"unknown feature backend {fc.backend!r}")
    if matcher is None:
        kind = fc.matcher
        if kind == "auto":
            kind = "landmark" if backend == "synthetic" else "descriptor"
        matcher = LandmarkMatcher() if kind == "landmark" else DescriptorMatcher(fc.lowe_ratio)
    return detector, matcher


def prepare_image(img: ImageBuffer, config: PipelineConfig) -> ImageBuffer:
    """Filter chain, or plain normalization to 8 bits for an empty chain."""
    return to_8bit(apply_chain(config.chain, img))


def run_sequence(config: PipelineConfig, manifest: DatasetManifest) -> tuple[Trajectory, Map, PipelineStats, Slam]:
    config.validate()
    detector, matcher = build_backends(config, manifest)
    slam = Slam(config, manifest.calibration, matcher)
    needs_image = not isinstance(detector, SyntheticDetector)
    for k, entry in enumerate(manifest.entries):
        img = None
        if needs_image:
            try:
                img = prepare_image(read_image(entry.path), config)
            except (OSError, ValueError) as exc:
                log.warning("frame %d unreadable: %s", k, exc)
                slam.skip(entry.timestamp, str(exc))
                continue
        feats: FeatureSet = detect(img, detector, config.features.max_features, frame_id=k)
        slam.process(Frame(k, entry.timestamp, feats))
    return slam.estimated_trajectory(), slam.map, slam.stats(), slam


def write_outputs(out: str | Path, traj: Trajectory, slam: Slam, stats: PipelineStats) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(traj, out / "trajectory.txt")
    kfs = sorted(slam.map.keyframes.values(), key=lambda k: k.timestamp)
    write_tum(Trajectory.from_poses([k.timestamp for k in kfs], [k.pose for k in kfs]), out / "keyframes.txt")
    write_ply(slam.map.point_array()[1], out / "map.ply")
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "events.log").write_text("".join(e + "\n" for e in slam.events))
    return out
