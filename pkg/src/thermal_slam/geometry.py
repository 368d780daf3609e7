"""Pinhole camera, rigid poses and two-view epipolar geometry.

Conventions used throughout the package:

* A :class:`Pose` maps world points into the camera frame, ``p_c = R @ X + t``.
* Pose increments are 6-vectors ``(rho, phi)`` applied on the left:
  ``R' = Exp(phi) R`` and ``t' = Exp(phi) t + rho``.
* "Normalized" image coordinates are undistorted, ``(X/Z, Y/Z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares


class GeometryError(ValueError):
    """Base class for recoverable geometric failures."""


class BehindCameraError(GeometryError):
    pass


class InsufficientDataError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class AmbiguousPoseError(GeometryError):
    pass


class LowParallaxError(GeometryError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a rotation vector."""
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1.0 - np.cos(theta)) / theta**2) * K @ K
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = M[:, int(np.argmax(np.diag(M)))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def rotation_angle(R: np.ndarray) -> float:
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


@dataclass
class Pose:
    """Rigid world-to-camera transform."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())

    @classmethod
    def from_rotvec(cls, rotvec, t) -> "Pose":
        return cls(so3_exp(np.asarray(rotvec, dtype=float)), t)

    @classmethod
    def from_center(cls, R_wc: np.ndarray, center: np.ndarray) -> "Pose":
        """Build from a camera-to-world rotation and the camera center."""
        R = np.asarray(R_wc, dtype=float).T
        return cls(R, -R @ np.asarray(center, dtype=float))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def retract(self, delta: np.ndarray) -> "Pose":
        dR = so3_exp(delta[3:6])
        return Pose(dR @ self.R, dR @ self.t + delta[0:3])

    def copy(self) -> "Pose":
        return Pose(self.R.copy(), self.t.copy())

    def is_orthonormal(self, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
            and abs(np.linalg.det(self.R) - 1.0) < tol
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @property
    def distortion(self) -> tuple[float, float, float, float]:
        return (self.k1, self.k2, self.p1, self.p2)

    @property
    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in self.distortion)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_size(self, width: int, height: int) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.p1, self.p2,
            int(width), int(height),
        )

    def distort(self, xn: np.ndarray) -> np.ndarray:
        xn = np.asarray(xn, dtype=float)
        if not self.has_distortion:
            return xn
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2 * self.p1 * x * y + self.p2 * (r2 + 2 * x * x)
        yd = y * radial + self.p1 * (r2 + 2 * y * y) + 2 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def undistort(self, xd: np.ndarray, iters: int = 20) -> np.ndarray:
        xd = np.asarray(xd, dtype=float)
        if not self.has_distortion:
            return xd
        xn = xd.copy()
        # fixed-point inversion, adequate for moderate distortion
        for _ in range(iters):
            x, y = xn[..., 0], xn[..., 1]
            r2 = x * x + y * y
            radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
            dx = 2 * self.p1 * x * y + self.p2 * (r2 + 2 * x * x)
            dy = self.p1 * (r2 + 2 * y * y) + 2 * self.p2 * x * y
            xn = np.stack([(xd[..., 0] - dx) / radial, (xd[..., 1] - dy) / radial], axis=-1)
        return xn

    def pixel_from_normalized(self, xn: np.ndarray) -> np.ndarray:
        xd = self.distort(xn)
        return np.stack([self.fx * xd[..., 0] + self.cx, self.fy * xd[..., 1] + self.cy], axis=-1)

    def normalized_from_pixel(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        xd = np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)
        return self.undistort(xd)

    def in_bounds(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 0] <= self.width - 1 - margin)
            & (uv[..., 1] <= self.height - 1 - margin)
        )


def load_calibration(path: str | Path) -> CameraIntrinsics:
    """Read ``fx fy cx cy k1 k2 p1 p2 [width height]`` from the first data line."""
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.replace(",", " ").split()]
        if len(vals) not in (8, 10):
            raise ValueError(f"{path}: expected 8 (or 10) calibration values, got {len(vals)}")
        size = (int(vals[8]), int(vals[9])) if len(vals) == 10 else (0, 0)
        return CameraIntrinsics(*vals[:8], *size)
    raise ValueError(f"{path}: no calibration line found")


def save_calibration(K: CameraIntrinsics, path: str | Path) -> None:
    vals = [K.fx, K.fy, K.cx, K.cy, K.k1, K.k2, K.p1, K.p2]
    line = " ".join(repr(float(v)) for v in vals)
    if K.width and K.height:
        line += f" {K.width} {K.height}"
    Path(path).write_text(line + "\n")


def project_points(K: CameraIntrinsics, T: Pose, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns pixels and camera-frame depths (no depth check)."""
    pc = T.transform(np.atleast_2d(X))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = pc[:, :2] / z[:, None]
    return K.pixel_from_normalized(xn), z


def project(K: CameraIntrinsics, T: Pose, X: np.ndarray) -> np.ndarray:
    pc = T.transform(np.asarray(X, dtype=float))
    if pc[2] <= 0:
        raise BehindCameraError(f"point has non-positive depth {pc[2]:.3g}")
    return K.pixel_from_normalized(pc[:2] / pc[2])


def unproject(K: CameraIntrinsics, T: Pose, uv: np.ndarray, depth: float) -> np.ndarray:
    xn = K.normalized_from_pixel(np.asarray(uv, dtype=float))
    pc = np.array([xn[0] * depth, xn[1] * depth, depth])
    return T.R.T @ (pc - T.t)


def parallax_angle(Ca: np.ndarray, Cb: np.ndarray, X: np.ndarray) -> float:
    ra = np.asarray(X, dtype=float) - np.asarray(Ca, dtype=float)
    rb = np.asarray(X, dtype=float) - np.asarray(Cb, dtype=float)
    denom = np.linalg.norm(ra) * np.linalg.norm(rb)
    if denom == 0.0:
        return 0.0
    return float(np.arccos(np.clip(ra @ rb / denom, -1.0, 1.0)))


def parallax_angles(Ca: np.ndarray, Cb: np.ndarray, X: np.ndarray) -> np.ndarray:
    ra = X - Ca
    rb = X - Cb
    denom = np.linalg.norm(ra, axis=1) * np.linalg.norm(rb, axis=1)
    cos = np.einsum("ij,ij->i", ra, rb) / np.maximum(denom, 1e-300)
    return np.arccos(np.clip(cos, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------

def _dlt_normalized(Ta: Pose, Tb: Pose, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    Pa = np.hstack([Ta.R, Ta.t[:, None]])
    Pb = np.hstack([Tb.R, Tb.t[:, None]])
    A = np.stack(
        [
            xa[:, 0, None] * Pa[2] - Pa[0],
            xa[:, 1, None] * Pa[2] - Pa[1],
            xb[:, 0, None] * Pb[2] - Pb[0],
            xb[:, 1, None] * Pb[2] - Pb[1],
        ],
        axis=1,
    )
    _, _, vt = np.linalg.svd(A)
    Xh = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return Xh[:, :3] / Xh[:, 3:4]


def _gauss_newton_refine(K: CameraIntrinsics, poses: list[Pose], uvs: list[np.ndarray], X: np.ndarray) -> np.ndarray:
    """One Gauss-Newton step on pixel reprojection error for each point."""
    from .optim import projection_jacobian  # local import avoids a cycle

    H = np.zeros((len(X), 3, 3))
    g = np.zeros((len(X), 3))
    for T, uv in zip(poses, uvs):
        pc = T.transform(X)
        proj, dproj = projection_jacobian(K, pc)
        r = proj - uv
        J = dproj @ T.R
        H += np.einsum("nki,nkj->nij", J, J)
        g += np.einsum("nki,nk->ni", J, r)
    ok = np.abs(np.linalg.det(H)) > 1e-18
    step = np.zeros_like(X)
    if ok.any():
        step[ok] = np.linalg.solve(H[ok], g[ok][..., None])[..., 0]
    return X - step


def triangulate_points(
    Ta: Pose, Tb: Pose, uva: np.ndarray, uvb: np.ndarray, K: CameraIntrinsics, refine: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized DLT + one Gauss-Newton step. Returns points and ray parallax (rad)."""
    uva = np.atleast_2d(np.asarray(uva, dtype=float))
    uvb = np.atleast_2d(np.asarray(uvb, dtype=float))
    xa = K.normalized_from_pixel(uva)
    xb = K.normalized_from_pixel(uvb)
    rays_a = np.hstack([xa, np.ones((len(xa), 1))]) @ Ta.R
    rays_b = np.hstack([xb, np.ones((len(xb), 1))]) @ Tb.R
    cos = np.einsum("ij,ij->i", rays_a, rays_b) / (
        np.linalg.norm(rays_a, axis=1) * np.linalg.norm(rays_b, axis=1)
    )
    parallax = np.arccos(np.clip(cos, -1.0, 1.0))
    if np.linalg.norm(Ta.center() - Tb.center()) < 1e-12:
        parallax = np.zeros(len(xa))
    X = _dlt_normalized(Ta, Tb, xa, xb)
    if refine:
        finite = np.all(np.isfinite(X), axis=1)
        if finite.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                X[finite] = _gauss_newton_refine(K, [Ta, Tb], [uva[finite], uvb[finite]], X[finite])
    return X, parallax


def triangulate(
    Ta: Pose,
    Tb: Pose,
    xa: np.ndarray,
    xb: np.ndarray,
    K: CameraIntrinsics,
    min_parallax_deg: float = 1.0,
) -> np.ndarray:
    """Triangulate one correspondence given in pixels."""
    X, parallax = triangulate_points(Ta, Tb, np.asarray(xa)[None], np.asarray(xb)[None], K)
    if parallax[0] < np.deg2rad(min_parallax_deg) or not np.all(np.isfinite(X[0])):
        raise LowParallaxError(
            f"ray parallax {np.rad2deg(parallax[0]):.3f} deg below {min_parallax_deg} deg"
        )
    return X[0]


# ---------------------------------------------------------------------------
# Essential matrix
# ---------------------------------------------------------------------------

@dataclass
class EssentialEstimate:
    E: np.ndarray
    inlier_mask: np.ndarray
    score: float


def project_to_essential(E: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _project_to_essential_batch(E: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(E)
    return (U * np.array([1.0, 1.0, 0.0])[None, None, :]) @ Vt


def essential_from_pose(T_ba: Pose) -> np.ndarray:
    """E such that ``xb^T E xa = 0`` when ``X_b = R X_a + t``."""
    return skew(T_ba.t) @ T_ba.R


def sampson_distance(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """First-order distance of correspondences to the epipolar variety.

    ``E`` may be a single 3x3 matrix or a stack ``(M, 3, 3)``; the result then
    has shape ``(M, N)``.
    """
    ha = np.hstack([xa, np.ones((len(xa), 1))])
    hb = np.hstack([xb, np.ones((len(xb), 1))])
    Ea = np.einsum("...ij,nj->...ni", E, ha)
    Etb = np.einsum("...ji,nj->...ni", E, hb)
    num = np.einsum("ni,...ni->...n", hb, Ea)
    den = Ea[..., 0] ** 2 + Ea[..., 1] ** 2 + Etb[..., 0] ** 2 + Etb[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def epipolar_error(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> float:
    """Sampson distance of a single normalized correspondence."""
    return float(sampson_distance(E, np.atleast_2d(xa), np.atleast_2d(xb))[0])


def _hartley(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = x.mean(axis=-2, keepdims=True)
    d = np.sqrt(((x - c) ** 2).sum(axis=-1)).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    xn = (x - c) * s[..., None, None]
    return xn, T


def _eight_point(xa: np.ndarray, xb: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """(Weighted) normalized 8-point on stacks ``(..., n, 2)``; returns ``(..., 3, 3)``."""
    na, Ta = _hartley(xa)
    nb, Tb = _hartley(xb)
    ones = np.ones(na.shape[:-1])
    A = np.stack(
        [
            nb[..., 0] * na[..., 0], nb[..., 0] * na[..., 1], nb[..., 0],
            nb[..., 1] * na[..., 0], nb[..., 1] * na[..., 1], nb[..., 1],
            na[..., 0], na[..., 1], ones,
        ],
        axis=-1,
    )
    if weights is not None:
        A = A * np.sqrt(weights)[..., None]
    _, _, Vt = np.linalg.svd(A)
    F = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    E = np.swapaxes(Tb, -1, -2) @ F @ Ta
    return _project_to_essential_batch(E) if E.ndim == 3 else project_to_essential(E)


def _magsac_quality(residuals: np.ndarray, sigmas: np.ndarray, k: float = 3.0) -> np.ndarray:
    """Per-correspondence quality marginalized over a discrete set of noise scales."""
    r2 = residuals[..., None] ** 2
    caps = (k * sigmas) ** 2
    return np.maximum(0.0, 1.0 - r2 / caps).mean(axis=-1)


def _refine_essential(E: np.ndarray, xa: np.ndarray, xb: np.ndarray, scale: float) -> np.ndarray:
    """Minimize robust signed Sampson error over (R, unit t) starting from ``E``."""
    T = decompose_essential(E)[0]
    R0, t0 = T.R, T.t / np.linalg.norm(T.t)
    b1 = np.cross(t0, np.eye(3)[np.argmin(np.abs(t0))])
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t0, b1)
    ha = np.hstack([xa, np.ones((len(xa), 1))])
    hb = np.hstack([xb, np.ones((len(xb), 1))])

    def make(p):
        t = t0 + p[3] * b1 + p[4] * b2
        return skew(t / np.linalg.norm(t)) @ so3_exp(p[:3]) @ R0

    def resid(p):
        Ep = make(p)
        Ea, Etb = ha @ Ep.T, hb @ Ep
        den = Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2
        return np.einsum("ni,ni->n", hb, Ea) / np.sqrt(np.maximum(den, 1e-300))

    sol = least_squares(resid, np.zeros(5), loss="huber", f_scale=scale, x_scale=1.0)
    out = make(sol.x)
    return out / np.linalg.norm(out)


def estimate_essential_robust(
    xa: np.ndarray,
    xb: np.ndarray,
    focal: float = 1.0,
    threshold_px: float = 1.5,
    max_iters: int = 1000,
    sigmas_px: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0),
    confidence: float = 0.999,
    lo_iters: int = 10,
    seed: int = 0,
    refine_starts: int = 10,
) -> EssentialEstimate:
    """Robust essential matrix from normalized correspondences.

    Hypotheses come from 8-point minimal samples and are ranked by a
    sigma-marginalized truncated-quadratic score. The winner is polished by
    local optimization: weighted least squares over its inliers plus
    resampled non-minimal inlier subsets. The LO winner and the
    ``refine_starts`` best sampled hypotheses are then polished by nonlinear
    least squares on the Sampson error; linear fits alone stall on the wrong
    side of the rotation/translation valley of narrow-field views. ``focal``
    converts the pixel thresholds into normalized units.
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    n = len(xa)
    if n < 5:
        raise InsufficientDataError(f"need at least 5 correspondences, got {n}")
    if n < 8:
        raise InsufficientDataError(f"8-point minimal solver needs 8 correspondences, got {n}")
    thr = threshold_px / focal
    sigmas = np.asarray(sigmas_px, dtype=float) / focal
    rng = np.random.default_rng(seed)

    best_E, best_score = None, -1.0
    pool: list[tuple[float, np.ndarray]] = []
    done, batch = 0, 128
    needed = max_iters
    while done < min(needed, max_iters):
        m = min(batch, max_iters - done)
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :8]
        Es = _eight_point(xa[idx], xb[idx])
        res = sampson_distance(Es, xa, xb)
        scores = _magsac_quality(res, sigmas).sum(axis=1)
        top = np.argsort(-scores, kind="stable")[:refine_starts]
        pool = sorted(pool + [(float(scores[i]), Es[i]) for i in top], key=lambda e: -e[0])[:refine_starts]
        j = int(np.argmax(scores))
        if scores[j] > best_score:
            best_score, best_E = float(scores[j]), Es[j]
            w = float(np.mean(res[j] < thr))
            if w > 0:
                p_good = max(w**8, 1e-12)
                needed = int(np.ceil(np.log(1 - confidence) / np.log(max(1 - p_good, 1e-12)))) if p_good < 1 else 1
        done += m

    # local optimization
    lo_size = min(n, 16)
    for _ in range(lo_iters):
        res = sampson_distance(best_E, xa, xb)
        q = _magsac_quality(res, sigmas)
        inl = np.flatnonzero(q > 0)
        if len(inl) < 8:
            break
        cands = [_eight_point(xa[inl], xb[inl], q[inl])]
        if len(inl) > lo_size:
            sub = np.argsort(rng.random((8, len(inl))), axis=1)[:, :lo_size]
            cands.extend(_eight_point(xa[inl][sub], xb[inl][sub]))
        improved = False
        for E in cands:
            s = float(_magsac_quality(sampson_distance(E, xa, xb), sigmas).sum())
            if s > best_score + 1e-12:
                best_score, best_E, improved = s, E, True
        if not improved:
            break

    # nonlinear polish from several starts
    for start in [best_E] + [E for _, E in pool]:
        inl = sampson_distance(start, xa, xb) < 3.0 * thr
        if inl.sum() < 8:
            continue
        E = _refine_essential(project_to_essential(start), xa[inl], xb[inl], thr)
        s = float(_magsac_quality(sampson_distance(E, xa, xb), sigmas).sum())
        if s > best_score + 1e-12:
            best_score, best_E = s, E

    E = project_to_essential(best_E)
    E = E / np.linalg.norm(E)
    mask = sampson_distance(E, xa, xb) < thr
    if mask.sum() < 8:
        raise DegenerateGeometryError("too few inliers supporting any essential matrix")
    _check_parallax(xa[mask], xb[mask], thr)
    return EssentialEstimate(E=E, inlier_mask=mask, score=best_score)


def _check_parallax(xa: np.ndarray, xb: np.ndarray, thr: float) -> None:
    """Reject correspondence sets explained by a pure rotation (no baseline)."""
    fa = np.hstack([xa, np.ones((len(xa), 1))])
    fb = np.hstack([xb, np.ones((len(xb), 1))])
    fa /= np.linalg.norm(fa, axis=1, keepdims=True)
    fb /= np.linalg.norm(fb, axis=1, keepdims=True)
    U, _, Vt = np.linalg.svd(fb.T @ fa)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", fb, fa @ R.T), -1.0, 1.0))
    if np.median(ang) < thr:
        raise DegenerateGeometryError(
            f"correspondences fit a pure rotation (median residual {np.median(ang):.2e} rad)"
        )


def decompose_essential(E: np.ndarray) -> list[Pose]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1, R2 = U @ W @ Vt, U @ W.T @ Vt
    t = U[:, 2]
    return [Pose(R1, t), Pose(R1, -t), Pose(R2, t), Pose(R2, -t)]


def cheirality_mask(T_ba: Pose, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    Xa = _dlt_normalized(Pose.identity(), T_ba, xa, xb)
    za = Xa[:, 2]
    zb = T_ba.transform(Xa)[:, 2]
    return np.isfinite(za) & (za > 0) & (zb > 0)


def recover_pose(
    estimate: EssentialEstimate | np.ndarray, xa: np.ndarray, xb: np.ndarray, use_inliers: bool = True
) -> tuple[Pose, np.ndarray]:
    """Pick the cheirality-consistent decomposition; translation has unit norm.

    Returns the relative pose of view b w.r.t. view a and the mask (over all
    correspondences) of points in front of both cameras.
    """
    if isinstance(estimate, EssentialEstimate):
        E, inl = estimate.E, estimate.inlier_mask
    else:
        E, inl = np.asarray(estimate), np.ones(len(xa), dtype=bool)
    if not use_inliers:
        inl = np.ones(len(xa), dtype=bool)
    xa_i, xb_i = np.asarray(xa)[inl], np.asarray(xb)[inl]
    best, best_mask = None, None
    for cand in decompose_essential(E):
        m = cheirality_mask(cand, xa_i, xb_i)
        if best_mask is None or m.sum() > best_mask.sum():
            best, best_mask = cand, m
    if best_mask.sum() <= 0.5 * len(xa_i):
        raise AmbiguousPoseError(
            f"best decomposition puts only {int(best_mask.sum())}/{len(xa_i)} points in front"
        )
    full = np.zeros(len(xa), dtype=bool)
    full[np.flatnonzero(inl)[best_mask]] = True
    best.t = best.t / np.linalg.norm(best.t)
    return best, full
