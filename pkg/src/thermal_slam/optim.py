"""Confidence-weighted bundle adjustment.

The cost minimized is ``C = sum_k rho_h(sigma_k^2 * |e_k|^2)`` where ``e_k``
is the pixel reprojection residual of factor ``k``, ``sigma_k`` is the
detector confidence of the observed keypoint and ``rho_h`` is the Huber
kernel acting on the squared (weighted) residual.

Levenberg-Marquardt runs on the normal equations with Marquardt diagonal
damping. Point blocks are eliminated through the Schur complement; a dense
path solving the full system is kept as an oracle.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .geometry import BehindCameraError, CameraIntrinsics, Pose

log = logging.getLogger(__name__)

CHI2_2DOF_95 = 5.991


class Mode(str, enum.Enum):
    MOTION_ONLY = "motion_only"
    LOCAL = "local"
    FULL = "full"


@dataclass
class ReprojectionFactor:
    pose_id: int
    point_id: int
    observed: np.ndarray
    score: float = 1.0
    huber_delta: float = 2.0

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=float).reshape(2)
        if not (0.0 < self.score <= 1.0):
            raise ValueError(f"confidence must lie in (0, 1], got {self.score}")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


@dataclass
class FactorGraphProblem:
    camera: CameraIntrinsics
    poses: dict[int, Pose] = field(default_factory=dict)
    points: dict[int, np.ndarray] = field(default_factory=dict)
    factors: list[ReprojectionFactor] = field(default_factory=list)
    fixed_poses: set[int] = field(default_factory=set)
    fixed_points: set[int] = field(default_factory=set)

    def add_pose(self, pid: int, pose: Pose, fixed: bool = False) -> None:
        self.poses[pid] = pose
        if fixed:
            self.fixed_poses.add(pid)

    def add_point(self, pid: int, X: np.ndarray, fixed: bool = False) -> None:
        self.points[pid] = np.asarray(X, dtype=float).copy()
        if fixed:
            self.fixed_points.add(pid)

    def add_factor(self, factor: ReprojectionFactor) -> None:
        self.factors.append(factor)

    def validate(self) -> None:
        for f in self.factors:
            if f.pose_id not in self.poses or f.point_id not in self.points:
                raise KeyError(f"factor references unknown vertex ({f.pose_id}, {f.point_id})")


@dataclass
class OptimConfig:
    huber_delta: float = 2.0
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e10
    max_iters_motion: int = 20
    max_iters_local: int = 10
    max_iters_full: int = 50
    chi2_gate: float = CHI2_2DOF_95
    gate_iteration: int = 5
    resolve_rounds: int = 2
    rel_tol: float = 1e-12
    linear_solver: str = "schur"

    def max_iters(self, mode: Mode) -> int:
        return {
            Mode.MOTION_ONLY: self.max_iters_motion,
            Mode.LOCAL: self.max_iters_local,
            Mode.FULL: self.max_iters_full,
        }[Mode(mode)]


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    outliers: list[int]
    converged: bool
    stop_reason: str = ""


# ---------------------------------------------------------------------------
# Residuals and Jacobians
# ---------------------------------------------------------------------------

def projection_jacobian(K: CameraIntrinsics, pc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixels of camera-frame points and d(pixel)/d(pc), shapes (n,2) and (n,2,3)."""
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / Z
    x, y = X * iz, Y * iz
    dn = np.zeros((len(pc), 2, 3))
    dn[:, 0, 0] = iz
    dn[:, 0, 2] = -x * iz
    dn[:, 1, 1] = iz
    dn[:, 1, 2] = -y * iz
    if K.has_distortion:
        r2 = x * x + y * y
        radial = 1.0 + K.k1 * r2 + K.k2 * r2 * r2
        dradial = K.k1 + 2.0 * K.k2 * r2  # d radial / d r2
        xd = x * radial + 2 * K.p1 * x * y + K.p2 * (r2 + 2 * x * x)
        yd = y * radial + K.p1 * (r2 + 2 * y * y) + 2 * K.p2 * x * y
        D = np.empty((len(pc), 2, 2))
        D[:, 0, 0] = radial + 2 * x * x * dradial + 2 * K.p1 * y + 6 * K.p2 * x
        D[:, 0, 1] = 2 * x * y * dradial + 2 * K.p1 * x + 2 * K.p2 * y
        D[:, 1, 0] = 2 * x * y * dradial + 2 * K.p1 * x + 2 * K.p2 * y
        D[:, 1, 1] = radial + 2 * y * y * dradial + 6 * K.p1 * y + 2 * K.p2 * x
        dn = D @ dn
    else:
        xd, yd = x, y
    proj = np.stack([K.fx * xd + K.cx, K.fy * yd + K.cy], axis=1)
    dn[:, 0, :] *= K.fx
    dn[:, 1, :] *= K.fy
    return proj, dn


def _linearize(K, R, t, X, obs):
    pc = np.einsum("nij,nj->ni", R, X) + t
    proj, dproj = projection_jacobian(K, pc)
    e = obs - proj
    J_point = -dproj @ R
    dpc = np.zeros((len(pc), 3, 6))
    dpc[:, 0, 0] = dpc[:, 1, 1] = dpc[:, 2, 2] = 1.0
    # d pc / d phi = -[pc]x
    dpc[:, 0, 4], dpc[:, 0, 5] = pc[:, 2], -pc[:, 1]
    dpc[:, 1, 3], dpc[:, 1, 5] = -pc[:, 2], pc[:, 0]
    dpc[:, 2, 3], dpc[:, 2, 4] = pc[:, 1], -pc[:, 0]
    J_pose = -dproj @ dpc
    return e, J_pose, J_point, pc[:, 2]


def residual_and_jacobians(
    factor: ReprojectionFactor, pose: Pose, point: np.ndarray, K: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual ``observed - project`` and its Jacobians w.r.t. the pose
    increment ``(rho, phi)`` and the world point."""
    e, Jp, Jl, z = _linearize(
        K, pose.R[None], pose.t[None], np.asarray(point, dtype=float)[None], factor.observed[None]
    )
    if z[0] <= 0:
        raise BehindCameraError("factor point is behind the camera")
    return e[0], Jp[0], Jl[0]


def huber(s: np.ndarray, delta: float | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Huber kernel on a squared error ``s``; returns value and derivative."""
    s = np.asarray(s, dtype=float)
    d2 = np.asarray(delta, dtype=float) ** 2
    inside = s <= d2
    sq = np.sqrt(np.maximum(s, 1e-300))
    rho = np.where(inside, s, 2.0 * np.asarray(delta) * sq - d2)
    drho = np.where(inside, 1.0, np.asarray(delta) / sq)
    return rho, drho


def weighted_cost(problem: FactorGraphProblem) -> float:
    K = problem.camera
    total = 0.0
    for f in problem.factors:
        e, _, _ = residual_and_jacobians(f, problem.poses[f.pose_id], problem.points[f.point_id], K)
        rho, _ = huber(f.score**2 * float(e @ e), f.huber_delta)
        total += float(rho)
    return total


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

class _Packed:
    """Array view of a problem used inside the LM loop."""

    def __init__(self, problem: FactorGraphProblem):
        self.K = problem.camera
        self.pose_ids = list(problem.poses)
        self.point_ids = list(problem.points)
        pidx = {p: i for i, p in enumerate(self.pose_ids)}
        lidx = {p: i for i, p in enumerate(self.point_ids)}
        self.R = np.stack([problem.poses[p].R for p in self.pose_ids]) if self.pose_ids else np.zeros((0, 3, 3))
        self.t = np.stack([problem.poses[p].t for p in self.pose_ids]) if self.pose_ids else np.zeros((0, 3))
        self.X = np.stack([problem.points[p] for p in self.point_ids]) if self.point_ids else np.zeros((0, 3))
        fs = problem.factors
        self.fpose = np.array([pidx[f.pose_id] for f in fs], dtype=int)
        self.fpoint = np.array([lidx[f.point_id] for f in fs], dtype=int)
        self.obs = np.array([f.observed for f in fs], dtype=float).reshape(-1, 2)
        self.sigma2 = np.array([f.score**2 for f in fs], dtype=float)
        self.delta = np.array([f.huber_delta for f in fs], dtype=float)
        free_pose = np.array([p not in problem.fixed_poses for p in self.pose_ids], dtype=bool)
        free_point = np.array([p not in problem.fixed_points for p in self.point_ids], dtype=bool)
        self.pose_var = np.full(len(self.pose_ids), -1)
        self.pose_var[free_pose] = np.arange(free_pose.sum())
        self.point_var = np.full(len(self.point_ids), -1)
        self.point_var[free_point] = np.arange(free_point.sum())
        self.n_pv = int(free_pose.sum())
        self.n_lv = int(free_point.sum())

    def state(self):
        return self.R.copy(), self.t.copy(), self.X.copy()

    def set_state(self, s):
        self.R, self.t, self.X = s[0].copy(), s[1].copy(), s[2].copy()

    def linearize(self, active: np.ndarray):
        k = np.flatnonzero(active)
        e, Jp, Jl, z = _linearize(
            self.K, self.R[self.fpose[k]], self.t[self.fpose[k]], self.X[self.fpoint[k]], self.obs[k]
        )
        return k, e, Jp, Jl, z

    def costs(self, active: np.ndarray):
        k, e, _, _, z = self.linearize(active)
        s = self.sigma2[k] * np.einsum("ni,ni->n", e, e)
        rho, _ = huber(s, self.delta[k])
        return k, s, rho, z

    def apply(self, dp: np.ndarray, dl: np.ndarray):
        for i in np.flatnonzero(self.pose_var >= 0):
            v = self.pose_var[i]
            d = dp[6 * v: 6 * v + 6]
            pose = Pose(self.R[i], self.t[i]).retract(d)
            self.R[i], self.t[i] = pose.R, pose.t
        free = self.point_var >= 0
        if free.any():
            self.X[free] += dl.reshape(-1, 3)[self.point_var[free]]

    def write_back(self, problem: FactorGraphProblem):
        for i, p in enumerate(self.pose_ids):
            if p not in problem.fixed_poses:
                problem.poses[p] = Pose(self.R[i].copy(), self.t[i].copy())
        for i, p in enumerate(self.point_ids):
            if p not in problem.fixed_points:
                problem.points[p] = self.X[i].copy()


def _scatter(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum rows of ``vals`` into ``n`` bins given by ``idx``."""
    width = int(np.prod(vals.shape[1:]))
    flat = vals.reshape(len(vals), width)
    out = np.empty((n, width))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + vals.shape[1:])


def build_normal_equations(packed: _Packed, active: np.ndarray):
    """Blocks of ``J^T W J`` and ``-J^T W e`` for the free variables.

    Returns per-factor data so both the Schur and the dense paths can share it.
    """
    k, e, Jp, Jl, z = packed.linearize(active)
    s = packed.sigma2[k] * np.einsum("ni,ni->n", e, e)
    _, drho = huber(s, packed.delta[k])
    w = packed.sigma2[k] * drho
    pv = packed.pose_var[packed.fpose[k]]
    lv = packed.point_var[packed.fpoint[k]]
    P, L = packed.n_pv, packed.n_lv
    mp, ml = pv >= 0, lv >= 0
    WJpT = (Jp * w[:, None, None]).transpose(0, 2, 1)
    WJlT = (Jl * w[:, None, None]).transpose(0, 2, 1)
    Hpp = _scatter(P, pv[mp], WJpT[mp] @ Jp[mp])
    bp = _scatter(P, pv[mp], -(WJpT[mp] @ e[mp][..., None])[..., 0])
    Hll = _scatter(L, lv[ml], WJlT[ml] @ Jl[ml])
    bl = _scatter(L, lv[ml], -(WJlT[ml] @ e[ml][..., None])[..., 0])
    both = mp & ml
    Hpl = WJpT[both] @ Jl[both]
    return Hpp, bp, Hll, bl, Hpl, pv[both], lv[both]


def _damp(H: np.ndarray, lam: float) -> np.ndarray:
    idx = np.arange(H.shape[-1])
    D = H[..., idx, idx]
    H = H.copy()
    H[..., idx, idx] = D + lam * np.maximum(D, 1e-9)
    return H


def _block_sparse(blocks: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape) -> sparse.csr_matrix:
    m, a, b = blocks.shape
    r = np.broadcast_to((a * rows)[:, None, None] + np.arange(a)[None, :, None], blocks.shape).ravel()
    c = np.broadcast_to((b * cols)[:, None, None] + np.arange(b)[None, None, :], blocks.shape).ravel()
    return sparse.csr_matrix((blocks.ravel(), (r, c)), shape=shape)


def solve_schur(Hpp, bp, Hll, bl, Hpl, pv, lv, lam):
    """Solve the damped system eliminating the 3x3 point blocks.

    The reduced camera matrix is ``Hpp - W Hll^-1 W^T`` with ``W`` the
    pose-point coupling blocks.
    """
    P, L = len(Hpp), len(Hll)
    Hpp_d = _damp(Hpp, lam)
    Hll_d = _damp(Hll, lam)
    if L == 0:
        S = np.zeros((6 * P, 6 * P))
        for i in range(P):
            S[6 * i: 6 * i + 6, 6 * i: 6 * i + 6] = Hpp_d[i]
        return np.linalg.solve(S, bp.reshape(-1)), np.zeros(0)
    Hll_inv = np.linalg.inv(Hll_d)
    if P == 0:
        dl = np.einsum("lij,lj->li", Hll_inv, bl)
        return np.zeros(0), dl.reshape(-1)
    S = np.zeros((6 * P, 6 * P))
    for i in range(P):
        S[6 * i: 6 * i + 6, 6 * i: 6 * i + 6] = Hpp_d[i]
    rhs = bp.reshape(-1).copy()
    if len(Hpl):
        W = _block_sparse(Hpl, pv, lv, (6 * P, 3 * L))
        Hinv = sparse.bsr_matrix((Hll_inv, np.arange(L), np.arange(L + 1)), shape=(3 * L, 3 * L)).tocsr()
        WH = W @ Hinv
        S -= (WH @ W.T).toarray()
        rhs -= WH @ bl.reshape(-1)
    dp = np.linalg.solve(S, rhs)
    r = bl.reshape(-1).copy()
    if len(Hpl):
        r -= W.T @ dp
    dl = np.einsum("lij,lj->li", Hll_inv, r.reshape(L, 3))
    return dp, dl.reshape(-1)


def assemble_dense(Hpp, bp, Hll, bl, Hpl, pv, lv):
    P, L = len(Hpp), len(Hll)
    n = 6 * P + 3 * L
    H = np.zeros((n, n))
    for i in range(P):
        H[6 * i: 6 * i + 6, 6 * i: 6 * i + 6] = Hpp[i]
    for j in range(L):
        o = 6 * P + 3 * j
        H[o: o + 3, o: o + 3] = Hll[j]
    for m in range(len(Hpl)):
        r, c = 6 * pv[m], 6 * P + 3 * lv[m]
        H[r: r + 6, c: c + 3] += Hpl[m]
        H[c: c + 3, r: r + 6] += Hpl[m].T
    b = np.concatenate([bp.reshape(-1), bl.reshape(-1)])
    return H, b


def solve_dense(Hpp, bp, Hll, bl, Hpl, pv, lv, lam):
    H, b = assemble_dense(Hpp, bp, Hll, bl, Hpl, pv, lv)
    d = np.linalg.solve(_damp(H, lam), b)
    P = len(Hpp)
    return d[: 6 * P], d[6 * P:]


def solve(problem: FactorGraphProblem, mode: Mode | str = Mode.FULL, config: OptimConfig | None = None) -> SolveReport:
    """Levenberg-Marquardt over the free vertices of ``problem`` (updated in place).

    Factors whose weighted squared residual exceeds the chi-square gate are
    excluded at the mid-optimization checkpoint and after convergence, after
    which the problem is re-solved on the remaining factors.
    """
    config = config or OptimConfig()
    mode = Mode(mode)
    problem.validate()
    if mode is Mode.MOTION_ONLY:
        problem.fixed_points = set(problem.points)
    if mode is Mode.FULL and not (problem.fixed_poses & set(problem.poses)) and problem.poses:
        problem.fixed_poses.add(next(iter(problem.poses)))

    packed = _Packed(problem)
    n = len(problem.factors)
    if n == 0:
        return SolveReport(0.0, 0.0, 0, [], True, "no factors")

    *_, z = packed.linearize(np.ones(n, dtype=bool))
    active = z > 0
    _, _, rho, _ = packed.costs(active)
    initial_cost = float(rho.sum())
    outliers: list[int] = []

    max_iters = config.max_iters(mode)
    solver = solve_dense if config.linear_solver == "dense" else solve_schur
    total_iters = 0
    converged = True
    reason = ""

    def gate() -> int:
        k, s, _, _ = packed.costs(active)
        bad = k[s > config.chi2_gate]
        # keep the problem constrained: never gate away every factor
        if len(bad) and len(bad) < len(k):
            active[bad] = False
            outliers.extend(int(b) for b in bad)
            return len(bad)
        return 0

    for round_ in range(config.resolve_rounds + 1):
        lam = config.lambda_init
        cost = float(packed.costs(active)[2].sum())
        it = 0
        while it < max_iters:
            if cost < 1e-24:
                reason = "zero cost"
                break
            if round_ == 0 and it == config.gate_iteration and gate():
                cost = float(packed.costs(active)[2].sum())
            blocks = build_normal_equations(packed, active)
            if packed.n_pv == 0 and packed.n_lv == 0:
                reason = "no free variables"
                break
            accepted = False
            while lam <= config.lambda_max:
                try:
                    dp, dl = solver(*blocks, lam)
                except np.linalg.LinAlgError:
                    lam *= config.lambda_up
                    continue
                if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dl))):
                    lam *= config.lambda_up
                    continue
                saved = packed.state()
                packed.apply(dp, dl)
                k, _, rho_new, z_new = packed.costs(active)
                new_cost = float(rho_new.sum())
                if np.all(z_new > 0) and np.isfinite(new_cost) and new_cost < cost:
                    accepted = True
                    lam = max(lam * config.lambda_down, 1e-12)
                    break
                packed.set_state(saved)
                lam *= config.lambda_up
            it += 1
            if not accepted:
                reason = "damping saturated"
                break
            rel = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            if rel < config.rel_tol:
                reason = "relative decrease below tolerance"
                break
        else:
            reason = "max iterations"
        total_iters += it
        if not np.isfinite(cost):
            converged = False
            reason = "non-finite cost"
            break
        if round_ == config.resolve_rounds or gate() == 0:
            break

    packed.write_back(problem)
    final_cost = float(packed.costs(active)[2].sum())
    return SolveReport(initial_cost, final_cost, total_iters, sorted(set(outliers)), converged, reason)


def full_ba_init(
    problem: FactorGraphProblem, first_pose_id: int, second_pose_id: int, config: OptimConfig | None = None
) -> SolveReport:
    """Full BA of a two-view map; the result is rescaled to a unit baseline."""
    problem.fixed_poses = {first_pose_id}
    problem.fixed_points = set()
    report = solve(problem, Mode.FULL, config)
    Ta, Tb = problem.poses[first_pose_id], problem.poses[second_pose_id]
    baseline = np.linalg.norm(Ta.center() - Tb.center())
    if baseline > 0 and np.isfinite(baseline):
        # similarity about the first camera keeps every reprojection unchanged
        s = 1.0 / baseline
        Ca = Ta.center()
        for pid in problem.points:
            problem.points[pid] = Ca + s * (problem.points[pid] - Ca)
        for pid, T in problem.poses.items():
            if pid != first_pose_id:
                C = Ca + s * (T.center() - Ca)
                problem.poses[pid] = Pose(T.R, -T.R @ C)
    return report


def dump_problem(problem: FactorGraphProblem, path: str | Path) -> None:
    """Write one vertex or factor per line for offline inspection."""
    lines = [
        "# CAMERA fx fy cx cy k1 k2 p1 p2",
        "CAMERA " + " ".join(repr(float(v)) for v in (
            problem.camera.fx, problem.camera.fy, problem.camera.cx, problem.camera.cy,
            *problem.camera.distortion)),
    ]
    for pid, T in problem.poses.items():
        vals = " ".join(repr(float(v)) for v in np.r_[T.R.ravel(), T.t])
        lines.append(f"POSE {pid} {int(pid in problem.fixed_poses)} {vals}")
    for pid, X in problem.points.items():
        vals = " ".join(repr(float(v)) for v in X)
        lines.append(f"POINT {pid} {int(pid in problem.fixed_points)} {vals}")
    for f in problem.factors:
        lines.append(
            f"FACTOR {f.pose_id} {f.point_id} {float(f.observed[0])!r} {float(f.observed[1])!r} {float(f.score)!r} {float(f.huber_delta)!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_problem(path: str | Path) -> FactorGraphProblem:
    problem = None
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "CAMERA":
            problem = FactorGraphProblem(CameraIntrinsics(*map(float, tok[1:9])))
        elif tok[0] == "POSE":
            v = np.array(tok[3:], dtype=float)
            problem.add_pose(int(tok[1]), Pose(v[:9].reshape(3, 3), v[9:]), fixed=tok[2] == "1")
        elif tok[0] == "POINT":
            problem.add_point(int(tok[1]), np.array(tok[3:6], dtype=float), fixed=tok[2] == "1")
        elif tok[0] == "FACTOR":
            problem.add_factor(ReprojectionFactor(
                int(tok[1]), int(tok[2]), np.array(tok[3:5], dtype=float), float(tok[5]), float(tok[6])))
    if problem is None:
        raise ValueError(f"{path}: missing CAMERA line")
    return problem
