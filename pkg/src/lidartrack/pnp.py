"""2D-3D correspondences from depth + flow, and RANSAC PnP with refinement.

The minimal solver inside RANSAC is damped Gauss-Newton started from the
tracking prior rather than a closed-form P3P: tracking always supplies a
near-correct initial pose, which makes local iteration reliable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (MIN_DEPTH, CameraIntrinsics, PoseSE3,
                       reprojection_jacobian, se3_exp)
from .rendering import DepthMap, FlowField


class TooFewCorrespondencesError(ValueError):
    """PnP needs at least four 2D-3D correspondences."""


class DegenerateConfigurationError(ValueError):
    """All 3D points are collinear; the pose is unobservable."""


@dataclass
class Correspondences:
    """Vectorized set of weighted 2D-3D matches."""

    p_world: np.ndarray   # (N, 3)
    x_img: np.ndarray     # (N, 2)
    weight: np.ndarray    # (N,)

    @classmethod
    def from_arrays(cls, p_world, x_img, weight=None) -> "Correspondences":
        p_world = np.asarray(p_world, dtype=float).reshape(-1, 3)
        x_img = np.asarray(x_img, dtype=float).reshape(-1, 2)
        if len(p_world) != len(x_img):
            raise ValueError("p_world and x_img length mismatch")
        if weight is None:
            weight = np.ones(len(p_world))
        else:
            weight = np.asarray(weight, dtype=float).reshape(-1)
            if np.any(weight < 0):
                raise ValueError("weights must be non-negative")
        return cls(p_world, x_img, weight)

    def __len__(self):
        return len(self.p_world)

    def subset(self, idx) -> "Correspondences":
        return Correspondences(self.p_world[idx], self.x_img[idx], self.weight[idx])


# final refinement uses at most this many inliers (deterministic stride);
# beyond a few thousand points the accuracy gain is negligible
REFINE_POINT_CAP = 4000


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 1000
    inlier_threshold: float = 2.0   # px
    min_inliers: int = 20
    confidence: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")


@dataclass
class RefineResult:
    pose: PoseSE3
    cost: float
    iterations: int
    converged: bool


@dataclass
class PnPResult:
    pose: PoseSE3
    inliers: np.ndarray
    success: bool
    rmse: float            # inlier reprojection RMSE, px
    hypotheses: int


def correspondences_from_flow(d: DepthMap, f: FlowField, points) -> Correspondences:
    """Pair each jointly valid pixel's source point with pixel + flow."""
    if d.depth.shape != f.shape:
        raise ValueError("depth map and flow field dimensions differ")
    mask = d.valid & f.valid
    rows, cols = np.nonzero(mask)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    p_world = pts[d.source[rows, cols]]
    x_img = np.stack([cols + f.du[rows, cols], rows + f.dv[rows, cols]], axis=1)
    return Correspondences.from_arrays(p_world, x_img)


def _huber_weights(norms, delta):
    w = np.ones_like(norms)
    big = norms > delta
    w[big] = delta / norms[big]
    return w


def _huber_cost(norms, delta):
    c = norms ** 2
    big = norms > delta
    c[big] = 2.0 * delta * norms[big] - delta * delta
    return c


def _project_plain(corrs, K, pose):
    cam = pose.apply(corrs.p_world)
    z = cam[:, 2]
    if np.any(z <= MIN_DEPTH):
        return None
    uv = np.empty((len(corrs), 2))
    uv[:, 0] = K.fx * cam[:, 0] / z + K.cx
    uv[:, 1] = K.fy * cam[:, 1] / z + K.cy
    return uv


def _reproj_cost(corrs, K, pose, huber_delta):
    uv = _project_plain(corrs, K, pose)
    if uv is None:
        return np.inf
    norms = np.linalg.norm(uv - corrs.x_img, axis=1)
    return float(np.sum(corrs.weight * _huber_cost(norms, huber_delta)))


def refine_pose(corrs: Correspondences, K: CameraIntrinsics, T0: PoseSE3,
                huber_delta: float = 2.0, max_iters: int = 30,
                rel_tol: float = 1e-12, lambda0: float = 1e-4) -> RefineResult:
    """Minimize the weighted Huber reprojection cost from T0.

    Levenberg-damped Gauss-Newton over the right-multiplicative local
    parameterization; accepted steps never increase the cost.  Points
    behind the camera at T0 are dropped up front, and trial steps that
    would push a retained point behind the camera are rejected.
    """
    if len(corrs) < 4:
        raise TooFewCorrespondencesError(f"need >= 4 correspondences, got {len(corrs)}")
    _check_not_collinear(corrs.p_world)
    z0 = T0.apply(corrs.p_world)[:, 2]
    kept = corrs.subset(z0 > MIN_DEPTH)
    if len(kept) < 4:
        raise TooFewCorrespondencesError("fewer than 4 correspondences in front of camera")

    pose = T0
    lam = lambda0
    cost = _reproj_cost(kept, K, pose, huber_delta)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        uv, z, J = reprojection_jacobian(K, pose, kept.p_world)
        r = uv - kept.x_img
        norms = np.linalg.norm(r, axis=1)
        wts = kept.weight * _huber_weights(norms, huber_delta)
        sw = np.sqrt(wts)[:, None]
        A = (J * sw[:, :, None]).reshape(-1, 6)
        b = (r * sw).reshape(-1)
        H = A.T @ A
        g = A.T @ b
        if np.linalg.norm(g, ord=np.inf) < 1e-12:
            converged = True
            break
        stepped = False
        for _ in range(12):
            D = H + lam * np.diag(np.diag(H)) + 1e-15 * np.eye(6)
            try:
                delta = np.linalg.solve(D, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = pose.compose(se3_exp(delta))
            trial_cost = _reproj_cost(kept, K, trial, huber_delta)
            if trial_cost < cost:
                rel_drop = (cost - trial_cost) / max(cost, 1e-300)
                pose, cost = trial, trial_cost
                lam = max(lam / 2.0, 1e-12)
                stepped = True
                if rel_drop < rel_tol:
                    converged = True
                break
            lam *= 10.0
        if not stepped:
            converged = True  # no descent direction left: local minimum
            break
        if converged:
            break
    return RefineResult(pose=pose, cost=cost, iterations=it, converged=converged)


def _check_not_collinear(p_world):
    p = np.asarray(p_world, dtype=float)
    c = p - p.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise DegenerateConfigurationError("3D points are collinear")


def _fit_minimal(corrs, K, T0):
    """Quick unweighted Gauss-Newton fit on a minimal sample."""
    pose = T0
    for _ in range(6):
        uv, z, J = reprojection_jacobian(K, pose, corrs.p_world)
        if np.any(z <= MIN_DEPTH):
            return None
        r = (uv - corrs.x_img).reshape(-1)
        A = J.reshape(-1, 6)
        H = A.T @ A + 1e-9 * np.eye(6)
        try:
            delta = np.linalg.solve(H, -(A.T @ r))
        except np.linalg.LinAlgError:
            return None
        pose = pose.compose(se3_exp(delta))
        if float(np.abs(delta).max()) < 1e-8:
            break
    return pose


def _reproj_errors(corrs, K, pose):
    cam = pose.apply(corrs.p_world)
    z = cam[:, 2]
    uv = np.empty((len(corrs), 2))
    zs = np.where(z > MIN_DEPTH, z, 1.0)
    uv[:, 0] = K.fx * cam[:, 0] / zs + K.cx
    uv[:, 1] = K.fy * cam[:, 1] / zs + K.cy
    err = np.linalg.norm(uv - corrs.x_img, axis=1)
    err[z <= MIN_DEPTH] = np.inf
    return err


def solve_pnp_ransac(corrs: Correspondences, K: CameraIntrinsics, T_init: PoseSE3,
                     cfg: RansacConfig) -> PnPResult:
    """RANSAC over minimal 4-point fits, then Huber refinement on inliers.

    Falls back to T_init with ``success=False`` when the best consensus
    set stays below ``min_inliers``.  Deterministic for a fixed seed.
    """
    n = len(corrs)
    if n < 4:
        raise TooFewCorrespondencesError(f"need >= 4 correspondences, got {n}")
    _check_not_collinear(corrs.p_world)
    rng = np.random.default_rng(cfg.seed)

    best_count = 0
    best_mask = np.zeros(n, dtype=bool)
    needed = cfg.max_iters
    it = 0
    while it < min(needed, cfg.max_iters):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        hyp = _fit_minimal(corrs.subset(sample), K, T_init)
        if hyp is None:
            continue
        err = _reproj_errors(corrs, K, hyp)
        mask = err < cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            ratio = count / n
            if ratio >= 1.0:
                needed = it
            else:
                p_good = max(ratio ** 4, 1e-12)
                needed = math.ceil(math.log(1.0 - cfg.confidence)
                                   / math.log(1.0 - p_good))

    if best_count < max(cfg.min_inliers, 4):
        return PnPResult(pose=T_init, inliers=np.zeros(n, dtype=bool),
                         success=False, rmse=float("inf"), hypotheses=it)

    refine_idx = np.nonzero(best_mask)[0]
    if len(refine_idx) > REFINE_POINT_CAP:
        stride = -(-len(refine_idx) // REFINE_POINT_CAP)
        refine_idx = refine_idx[::stride]
    refined = refine_pose(corrs.subset(refine_idx), K, T_init)
    err = _reproj_errors(corrs, K, refined.pose)
    final_mask = err < cfg.inlier_threshold
    if int(final_mask.sum()) < max(cfg.min_inliers, 4):
        final_mask = best_mask
    rmse = float(np.sqrt(np.mean(err[final_mask] ** 2)))
    return PnPResult(pose=refined.pose, inliers=final_mask, success=True,
                     rmse=rmse, hypotheses=it)
