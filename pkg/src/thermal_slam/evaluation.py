"""Trajectory alignment, absolute trajectory error and tracking statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose


class EvaluationError(ValueError):
    pass


class NoOverlapError(EvaluationError):
    pass


class DegenerateAlignmentError(EvaluationError):
    pass


@dataclass
class Trajectory:
    """Camera centers and camera-to-world rotations, indexed by timestamp."""

    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray  # (N,4) x y z w, camera-to-world

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        if len(q) == 0 and len(self.positions):
            q = np.tile([0.0, 0.0, 0.0, 1.0], (len(self.positions), 1))
        self.quaternions = q
        if not (len(self.timestamps) == len(self.positions) == len(self.quaternions)):
            raise EvaluationError("trajectory arrays differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise EvaluationError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def from_poses(cls, stamps, poses: list[Pose]) -> "Trajectory":
        """Build from world-to-camera poses."""
        if not poses:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
        centers = np.array([p.center() for p in poses])
        quats = Rotation.from_matrix(np.array([p.R.T for p in poses])).as_quat()
        return cls(np.asarray(stamps, dtype=float), centers, quats)

    def poses(self) -> list[Pose]:
        Rwc = Rotation.from_quat(self.quaternions).as_matrix().reshape(-1, 3, 3)
        return [Pose.from_center(R, c) for R, c in zip(Rwc, self.positions)]

    def transformed(self, s: float, R: np.ndarray, t: np.ndarray) -> "Trajectory":
        """Apply ``x -> s R x + t`` to positions and ``R`` to orientations."""
        pos = s * self.positions @ np.asarray(R).T + t
        rot = Rotation.from_matrix(R) * Rotation.from_quat(self.quaternions) if len(self) else None
        quats = rot.as_quat() if rot is not None else self.quaternions
        return Trajectory(self.timestamps.copy(), pos, quats)


def read_tum(path: str | Path) -> Trajectory:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise EvaluationError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            rows.append([float(v) for v in parts])
    if not rows:
        return Trajectory(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
    a = np.array(rows)
    return Trajectory(a[:, 0], a[:, 1:4], a[:, 4:8])


def write_tum(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
            fh.write(f"{ts:.6f} " + " ".join(f"{v:.9f}" for v in (*p, *q)) + "\n")


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> np.ndarray:
    """Greedy nearest-timestamp pairing; returns (M,2) index pairs (est, gt)."""
    if len(est) == 0 or len(gt) == 0:
        raise NoOverlapError("empty trajectory")
    dt = np.abs(est.timestamps[:, None] - gt.timestamps[None, :])
    ei, gi = np.nonzero(dt <= max_dt)
    order = np.lexsort((gi, ei, dt[ei, gi]))
    used_e: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for o in order:
        e, g = int(ei[o]), int(gi[o])
        if e in used_e or g in used_g:
            continue
        used_e.add(e)
        used_g.add(g)
        pairs.append((e, g))
    if not pairs:
        raise NoOverlapError(f"no timestamp pairs within {max_dt} s")
    pairs.sort()
    return np.array(pairs, dtype=np.int64)


@dataclass
class AlignmentResult:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    rmse: float

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(X) @ self.rotation.T + self.translation


def align_sim3(est: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> AlignmentResult:
    """Least-squares ``gt ~ s R est + t`` in closed form (Umeyama)."""
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(est) != len(gt):
        raise EvaluationError("point sets differ in length")
    if len(est) < 3:
        raise DegenerateAlignmentError("need at least 3 position pairs")
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    de, dg = est - mu_e, gt - mu_g
    var_e = float(np.mean(np.sum(de**2, axis=1)))
    sv_e = np.linalg.svd(de, compute_uv=False)
    if var_e <= 1e-24 or sv_e[1] <= 1e-9 * max(sv_e[0], 1e-300):
        raise DegenerateAlignmentError("estimate positions are collinear or coincident")
    cov = dg.T @ de / len(est)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_e) if with_scale else 1.0
    t = mu_g - s * R @ mu_e
    resid = gt - (s * est @ R.T + t)
    rmse = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return AlignmentResult(s, R, t, rmse)


def ate_rmse(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> float:
    pairs = associate(est, gt, max_dt)
    return align_sim3(est.positions[pairs[:, 0]], gt.positions[pairs[:, 1]]).rmse


def tracked_percentage(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> float:
    """Share of ground-truth frames with an associated estimate, in percent."""
    if len(gt) == 0:
        return 0.0
    try:
        return 100.0 * len(associate(est, gt, max_dt)) / len(gt)
    except NoOverlapError:
        return 0.0


def tracked_stats(runs) -> tuple[float, float]:
    """Median and interquartile range, linear-interpolation quantiles."""
    a = np.asarray(list(runs), dtype=np.float64)
    if a.size == 0:
        raise EvaluationError("no runs")
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return float(med), float(q3 - q1)


def write_csv(rows: list[dict], path: str | Path, fields: list[str] | None = None) -> None:
    fields = fields or (list(rows[0]) if rows else ["name", "ate", "tracked_pct"])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
