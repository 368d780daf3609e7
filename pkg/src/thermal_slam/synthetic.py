"""Synthetic scenes: camera paths, landmark clouds, observations and rendered frames.

A generated dataset directory contains::

    images/000000.png ...   rendered 16-bit frames (or blank 8-bit placeholders)
    times.txt               "timestamp filename" per frame
    calib.txt               fx fy cx cy k1 k2 p1 p2
    groundtruth.txt         TUM trajectory
    landmarks.txt           x y z per landmark
    features.npy            (M,5) rows: frame, x, y, score, landmark  [sidecar mode]
    scene.toml              the scene description used
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import tomli
import tomli_w

from .evaluation import Trajectory, write_tum
from .geometry import CameraIntrinsics, Pose, project_points, save_calibration


@dataclass
class SyntheticSceneSpec:
    shape: str = "circle"  # circle | line | lissajous
    n_frames: int = 300
    fps: float = 30.0
    radius: float = 3.0  # circle radius / lissajous amplitude
    arc_deg: float = 360.0  # swept angle of the circle
    length: float = 6.0  # line length
    height: float = 0.0
    n_landmarks: int = 500
    landmark_extent: float = 1.5
    noise_px: float = 0.5
    outlier_fraction: float = 0.0
    outlier_score: float = 0.05
    outlier_mode: str = "local"  # local | uniform | ghost
    burst_period: int = 10  # 0 spreads outliers evenly over all frames
    burst_fraction: float = 0.75
    ghost_rotation_deg: float = 4.0
    ghost_shift: float = 0.15
    dropout: list[list[int]] = field(default_factory=list)  # [start, stop) frame ranges with no features
    render: bool = False
    width: int = 640
    height_px: int = 480
    focal: float = 400.0
    seed: int = 0

    def __post_init__(self):
        if self.n_landmarks <= 0:
            raise ValueError("landmark count must be positive")
        if self.noise_px < 0:
            raise ValueError("pixel noise must be non-negative")
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise ValueError("outlier fraction must lie in [0, 1)")
        if not (0.0 < self.outlier_score <= 1.0):
            raise ValueError("outlier score must lie in (0, 1]")
        if self.shape not in ("circle", "line", "lissajous"):
            raise ValueError(f"unknown trajectory shape {self.shape!r}")
        if self.outlier_mode not in ("ghost", "uniform", "local"):
            raise ValueError(f"unknown outlier mode {self.outlier_mode!r}")
        if self.burst_period < 0 or not (self.outlier_fraction <= self.burst_fraction < 1.0):
            raise ValueError("burst fraction must lie in [outlier_fraction, 1)")
        self.dropout = [list(map(int, r)) for r in self.dropout]

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.focal, self.focal, self.width / 2.0, self.height_px / 2.0, width=self.width, height=self.height_px
        )

    def to_toml(self) -> str:
        return tomli_w.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, text: str) -> "SyntheticSceneSpec":
        return cls.from_dict(tomli.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticSceneSpec":
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose with +z toward ``target`` and -y toward ``up``."""
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_center(np.stack([x, y, z], axis=1), center)


def camera_path(spec: SyntheticSceneSpec) -> list[Pose]:
    n = spec.n_frames
    s = np.arange(n) / max(n, 1)
    poses = []
    if spec.shape == "circle":
        for a in np.deg2rad(spec.arc_deg) * s:
            c = np.array([spec.radius * np.cos(a), spec.radius * np.sin(a), spec.height])
            poses.append(look_at(c, np.zeros(3)))
    elif spec.shape == "line":
        for u in s:
            c = np.array([spec.length * u, 0.0, spec.height])
            poses.append(look_at(c, c + np.array([0.3, 1.0, 0.0])))
    else:
        for a in 2 * np.pi * s:
            c = np.array(
                [0.5 * spec.radius * np.sin(a), 0.3 * spec.radius * np.sin(2 * a), spec.height - spec.radius]
            )
            poses.append(look_at(c, np.array([0.2 * np.sin(a), 0.2 * np.cos(a), 0.0]), up=(0.0, 1.0, 0.0)))
    return poses


def landmarks(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_landmarks
    e = spec.landmark_extent
    if spec.shape == "line":
        # two walls along the corridor, landmarks spread over its whole length
        x = rng.uniform(-1.0, spec.length + 3.0, n)
        y = np.where(rng.random(n) < 0.5, 2.0, 3.5) + rng.uniform(-0.3, 0.3, n)
        z = rng.uniform(-e, e, n)
        return np.stack([x, y, z], axis=1)
    return rng.uniform(-e, e, (n, 3))


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    poses: list[Pose]
    points: np.ndarray
    timestamps: np.ndarray
    observations: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # per frame: xy, score, landmark id
    outlier_masks: list[np.ndarray]

    @property
    def camera(self) -> CameraIntrinsics:
        return self.spec.camera

    def trajectory(self) -> Trajectory:
        return Trajectory.from_poses(self.timestamps, self.poses)


def _in_dropout(spec: SyntheticSceneSpec, k: int) -> bool:
    return any(a <= k < b for a, b in spec.dropout)


def _outlier_rate(spec: SyntheticSceneSpec, k: int) -> float:
    if spec.outlier_fraction == 0:
        return 0.0
    if spec.burst_period == 0:
        return spec.outlier_fraction
    # contamination concentrated in periodic bursts, same average rate
    period = spec.burst_period
    n_burst = spec.outlier_fraction / spec.burst_fraction * period
    full = int(np.floor(n_burst))
    phase = k % period
    if phase >= period - full:
        return spec.burst_fraction
    if phase == period - full - 1:
        return (n_burst - full) * spec.burst_fraction
    return 0.0


def generate_scene(spec: SyntheticSceneSpec) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    X = landmarks(spec, rng)
    poses = camera_path(spec)
    K = spec.camera
    stamps = np.arange(spec.n_frames) / spec.fps
    obs = []
    masks = []
    ghost_rng = np.random.default_rng([spec.seed, 7])
    for k, T in enumerate(poses):
        uv, z = project_points(K, T, X)
        vis = (z > 0.1) & K.in_bounds(uv, 2.0)
        ids = np.flatnonzero(vis)
        if _in_dropout(spec, k):
            ids = ids[:0]
        n = len(ids)
        noise = rng.normal(0.0, spec.noise_px, (n, 2)) if spec.noise_px > 0 else np.zeros((n, 2))
        xy = uv[ids] + noise
        score = np.exp(-np.linalg.norm(noise, axis=1))
        rate = _outlier_rate(spec, k)
        out = rng.random(n) < rate
        m = int(out.sum())
        if m:
            if spec.outlier_mode == "uniform":
                xy[out] = rng.uniform([0, 0], [K.width, K.height], (m, 2))
            elif spec.outlier_mode == "local":
                ang = rng.uniform(0, 2 * np.pi, m)
                r = rng.uniform(3.0, 15.0, m)
                xy[out] += np.stack([np.cos(ang), np.sin(ang)], axis=1) * r[:, None]
            else:
                # coherent ghost: the landmarks as seen from a displaced camera
                rv = ghost_rng.normal(0.0, 1.0, 3)
                phi = np.deg2rad(spec.ghost_rotation_deg) * rv / np.linalg.norm(rv)
                ghost = T.retract(np.concatenate([ghost_rng.normal(0.0, spec.ghost_shift, 3), phi]))
                guv, gz = project_points(K, ghost, X[ids[out]])
                ok = gz > 0.1
                xy[np.flatnonzero(out)[ok]] = guv[ok]
            score[out] = spec.outlier_score
        inside = K.in_bounds(xy, 0.0)
        obs.append((xy[inside], np.clip(score[inside], 1e-6, 1.0), ids[inside]))
        masks.append(out[inside])
    return SyntheticScene(spec, poses, X, stamps, obs, masks)


def _render_frame(scene: SyntheticScene, k: int, rng: np.random.Generator) -> np.ndarray:
    spec = scene.spec
    h, w = spec.height_px, spec.width
    img = np.full((h, w), 20000.0)
    yy, xx = np.mgrid[0:h, 0:w]
    img += 400.0 * (xx / w) + 200.0 * (yy / h)  # slow vignetting-like gradient
    if not _in_dropout(spec, k):
        T = scene.poses[k]
        uv, z = project_points(scene.camera, T, scene.points)
        vis = np.flatnonzero((z > 0.1) & scene.camera.in_bounds(uv, -4.0))
        amp_rng = np.random.default_rng([spec.seed, 11])
        amps = amp_rng.uniform(150.0, 600.0, len(scene.points))
        sizes = amp_rng.uniform(1.2, 2.6, len(scene.points))
        for j in vis:
            s = sizes[j] * 3.0 / max(z[j], 0.5)
            r = int(np.ceil(3 * s))
            cx, cy = uv[j]
            x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 1, w)
            y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 1, h)
            gx = np.exp(-((xx[y0:y1, x0:x1] - cx) ** 2 + (yy[y0:y1, x0:x1] - cy) ** 2) / (2 * s * s))
            img[y0:y1, x0:x1] += amps[j] * gx
    img = cv2.GaussianBlur(img, (0, 0), 1.0)
    img += rng.normal(0.0, 25.0, img.shape)
    hot = rng.random(img.shape) < 5e-4
    img[hot] = 65535.0
    cold = rng.random(img.shape) < 5e-4
    img[cold] = 0.0
    return np.clip(np.rint(img), 0, 65535).astype(np.uint16)


def write_dataset(scene: SyntheticScene, out: str | Path) -> Path:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    spec = scene.spec
    save_calibration(scene.camera, out / "calib.txt")
    write_tum(scene.trajectory(), out / "groundtruth.txt")
    np.savetxt(out / "landmarks.txt", scene.points, fmt="%.9f")
    (out / "scene.toml").write_text(spec.to_toml())
    names = [f"images/{k:06d}.png" for k in range(spec.n_frames)]
    with open(out / "times.txt", "w") as fh:
        for ts, name in zip(scene.timestamps, names):
            fh.write(f"{ts:.6f} {name}\n")
    if spec.render:
        rng = np.random.default_rng([spec.seed, 3])
        for k, name in enumerate(names):
            cv2.imwrite(str(out / name), _render_frame(scene, k, rng))
    else:
        blank = np.zeros((spec.height_px, spec.width), np.uint8)
        for name in names:
            cv2.imwrite(str(out / name), blank)
        rows = [
            np.column_stack([np.full(len(xy), k, float), xy, sc, lid.astype(float)])
            for k, (xy, sc, lid) in enumerate(scene.observations)
        ]
        table = np.vstack(rows) if rows else np.zeros((0, 5))
        np.save(out / "features.npy", table)
    return out


def generate_synthetic(spec: SyntheticSceneSpec, out: str | Path) -> SyntheticScene:
    scene = generate_scene(spec)
    write_dataset(scene, out)
    return scene
