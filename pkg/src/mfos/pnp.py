"""Pose recovery from a predicted dense 2D-3D map.

Pipeline: keep pixels whose confidence clears a threshold, draw a
confidence-weighted working set, then run RANSAC over minimal 6-point
samples, and refit on the consensus set with damped Gauss-Newton.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateConfiguration, NoConsensus, TooFewPoints
from .geom import Intrinsics, Pose, RefFrame, denormalize, exp_so3, project_to_so3

MIN_SAMPLE = 6


@dataclass(frozen=True)
class PnPConfig:
    conf_threshold: float = 2.5
    n_samples: int = 1024
    max_iter: int = 1000
    reproj_px: float = 5.0
    min_inliers: int = 6
    confidence: float = 0.999
    weighted_refit: bool = True
    conf_clamp: float = 5.0

    def __post_init__(self):
        for name in ("conf_threshold", "n_samples", "max_iter", "reproj_px", "min_inliers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class CorrespondenceSet:
    px: np.ndarray  # (N, 2) pixel coordinates
    ref3d: np.ndarray  # (N, 3) reference coordinates, or meters after to_metric()
    conf: np.ndarray  # (N,) positive weights

    def __post_init__(self):
        self.px = np.asarray(self.px, dtype=np.float64).reshape(-1, 2)
        self.ref3d = np.asarray(self.ref3d, dtype=np.float64).reshape(-1, 3)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)
        if not len(self.px) == len(self.ref3d) == len(self.conf):
            raise ValueError("correspondence arrays must have equal lengths")
        if np.any(self.conf <= 0):
            raise ValueError("confidences must be positive")

    def __len__(self) -> int:
        return len(self.px)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.px[idx], self.ref3d[idx], self.conf[idx])

    def to_metric(self, frame: RefFrame) -> "CorrespondenceSet":
        """Map reference coordinates to object-frame meters."""
        return CorrespondenceSet(self.px, denormalize(frame, self.ref3d), self.conf)


def extract_correspondences(pred, cfg: PnPConfig = PnPConfig()) -> CorrespondenceSet:
    """Pixels with tau >= ``conf_threshold``, located at their (integer) pixel centers."""
    coords = _numpy(pred.coords)
    tau = np.exp(np.clip(_numpy(pred.conf_raw), -cfg.conf_clamp, cfg.conf_clamp))
    rows, cols = np.nonzero(tau >= cfg.conf_threshold)
    if len(rows) < cfg.min_inliers:
        raise TooFewPoints(f"{len(rows)} pixels above confidence {cfg.conf_threshold}, "
                           f"need {cfg.min_inliers}")
    px = np.stack([cols, rows], axis=-1).astype(np.float64)
    return CorrespondenceSet(px, coords[rows, cols], tau[rows, cols])


def _numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def weighted_sample(c: CorrespondenceSet, n: int, rng: np.random.Generator) -> CorrespondenceSet:
    """``n`` draws without replacement, probability proportional to confidence."""
    if len(c) <= n:
        return c
    p = c.conf / c.conf.sum()
    return c.subset(rng.choice(len(c), size=n, replace=False, p=p))


# --------------------------------------------------------------------------
# closed-form initialization

def _normalized_rays(k: Intrinsics, px) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    return np.stack([(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy], axis=-1)


def _similarity(pts):
    """Hartley normalization: center, then scale mean distance to sqrt(dim)."""
    d = pts.shape[1]
    mu = pts.mean(axis=0)
    dist = np.linalg.norm(pts - mu, axis=1).mean()
    s = math.sqrt(d) / dist if dist > 0 else 1.0
    t = np.eye(d + 1)
    t[:d, :d] *= s
    t[:d, d] = -s * mu
    return t


def _homog(pts):
    return np.hstack([pts, np.ones((len(pts), 1))])


def _dlt_general(x3, xn, w) -> Pose:
    t3, t2 = _similarity(x3), _similarity(xn)
    xh = _homog(x3) @ t3.T
    uv = _homog(xn) @ t2.T
    n = len(x3)
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -uv[:, :1] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -uv[:, 1:2] * xh
    sw = np.sqrt(w / w.max())
    a *= np.repeat(sw, 2)[:, None]
    _, s, vt = np.linalg.svd(a)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfiguration("DLT system has a multi-dimensional null space")
    p = np.linalg.inv(t2) @ vt[-1].reshape(3, 4) @ t3
    if np.linalg.det(p[:, :3]) < 0:
        p = -p
    u, sv, vt3 = np.linalg.svd(p[:, :3])
    scale = sv.mean()
    if scale <= 0:
        raise DegenerateConfiguration("DLT produced a singular camera matrix")
    return Pose(u @ vt3, p[:, 3] / scale)


def _dlt_planar(x3, xn, w, centroid, basis) -> Pose:
    ab = (x3 - centroid) @ basis[:2].T
    ta, t2 = _similarity(ab), _similarity(xn)
    abh = _homog(ab) @ ta.T
    uv = _homog(xn) @ t2.T
    n = len(x3)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = abh
    a[0::2, 6:9] = -uv[:, :1] * abh
    a[1::2, 3:6] = abh
    a[1::2, 6:9] = -uv[:, 1:2] * abh
    a *= np.repeat(np.sqrt(w / w.max()), 2)[:, None]
    _, s, vt = np.linalg.svd(a)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfiguration("homography system is rank deficient")
    h = np.linalg.inv(t2) @ vt[-1].reshape(3, 3) @ ta
    h /= 0.5 * (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    if h[2, 2] < 0:
        h = -h
    m = project_to_so3(np.column_stack([h[:, 0], h[:, 1], np.cross(h[:, 0], h[:, 1])]))
    r = m @ basis
    return Pose(r, h[:, 2] - r @ centroid)


def initial_pose(x3, xn, w) -> Pose:
    """Closed-form pose from normalized image coordinates ``xn`` of points ``x3``."""
    n = len(x3)
    if n < 4:
        raise DegenerateConfiguration(f"{n} points cannot determine a pose")
    centroid = x3.mean(axis=0)
    _, s, basis = np.linalg.svd(x3 - centroid)
    if np.linalg.det(basis) < 0:
        basis[2] = -basis[2]
    if s[0] <= 0 or s[1] < 1e-6 * s[0]:
        raise DegenerateConfiguration("3D points are collinear or coincident")
    planar = s[2] < 2e-2 * s[0]
    if not planar and n < MIN_SAMPLE:
        raise DegenerateConfiguration(f"non-planar PnP needs {MIN_SAMPLE} points, got {n}")
    pose = _dlt_planar(x3, xn, w, centroid, basis) if planar else _dlt_general(x3, xn, w)
    if np.all(pose.apply(x3)[:, 2] <= 0):
        raise BehindCamera("all points have nonpositive depth")
    return pose


# --------------------------------------------------------------------------
# refinement

def _residuals(pose: Pose, k: Intrinsics, x3, px, sw):
    y = pose.apply(x3)
    z = y[:, 2]
    if np.any(z <= 1e-12):
        return None, y
    uv = np.stack([k.fx * y[:, 0] / z + k.cx, k.fy * y[:, 1] / z + k.cy], axis=-1)
    return ((uv - px) * sw[:, None]).reshape(-1), y


def _skew_batch(v):
    s = np.zeros((len(v), 3, 3))
    s[:, 0, 1], s[:, 0, 2] = -v[:, 2], v[:, 1]
    s[:, 1, 0], s[:, 1, 2] = v[:, 2], -v[:, 0]
    s[:, 2, 0], s[:, 2, 1] = -v[:, 1], v[:, 0]
    return s


def refine_pose(pose: Pose, k: Intrinsics, x3, px, w, max_iter: int = 50, tol: float = 1e-10):
    """Levenberg-style damped Gauss-Newton on the weighted reprojection cost.

    Returns the refined pose and the cost after each accepted step (the first
    entry is the starting cost).
    """
    sw = np.sqrt(w)
    r, y = _residuals(pose, k, x3, px, sw)
    if r is None:
        return pose, [math.inf]
    cost = float(r @ r)
    history = [cost]
    mu = 1e-3
    for _ in range(max_iter):
        z = y[:, 2]
        ju = np.zeros((len(x3), 2, 3))
        ju[:, 0, 0] = k.fx / z
        ju[:, 0, 2] = -k.fx * y[:, 0] / z ** 2
        ju[:, 1, 1] = k.fy / z
        ju[:, 1, 2] = -k.fy * y[:, 1] / z ** 2
        ry = y - pose.t  # R X
        drot = -np.einsum("nij,njk->nik", ju, _skew_batch(ry))
        jac = np.concatenate([drot, ju], axis=2) * sw[:, None, None]
        jac = jac.reshape(-1, 6)
        a = jac.T @ jac
        g = jac.T @ r
        accepted = False
        while mu < 1e12:
            try:
                delta = np.linalg.solve(a + mu * np.diag(np.diag(a) + 1e-30), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = Pose(exp_so3(delta[:3]) @ pose.r, pose.t + delta[3:])
            rc, yc = _residuals(cand, k, x3, px, sw)
            if rc is not None and float(rc @ rc) < cost:
                new_cost = float(rc @ rc)
                pose, r, y = cand, rc, yc
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                break
            mu *= 5.0
        if not accepted:
            break
        drop = cost - new_cost
        cost = new_cost
        history.append(cost)
        if drop <= tol * history[-2]:
            break
    return Pose(project_to_so3(pose.r), pose.t), history


def solve_pnp(c: CorrespondenceSet, k: Intrinsics, weights=None) -> Pose:
    """Weighted reprojection-error local optimum; ``c.ref3d`` must be metric."""
    w = c.conf if weights is None else np.asarray(weights, dtype=np.float64)
    pose = initial_pose(c.ref3d, _normalized_rays(k, c.px), w)
    pose, _ = refine_pose(pose, k, c.ref3d, c.px, w)
    if np.all(pose.apply(c.ref3d)[:, 2] <= 0):
        raise BehindCamera("all points have nonpositive depth")
    return pose


def reprojection_errors(pose: Pose, k: Intrinsics, x3, px) -> np.ndarray:
    """Pixel error per point; infinite for points at or behind the camera."""
    y = pose.apply(x3)
    z = y[:, 2]
    err = np.full(len(x3), np.inf)
    ok = z > 1e-12
    uv = np.stack([k.fx * y[ok, 0] / z[ok] + k.cx, k.fy * y[ok, 1] / z[ok] + k.cy], axis=-1)
    err[ok] = np.linalg.norm(uv - px[ok], axis=1)
    return err


@dataclass
class RansacInfo:
    trials: int
    hypothesis_inliers: int
    inliers: int


def _required_trials(inlier_ratio: float, confidence: float) -> float:
    good = inlier_ratio ** MIN_SAMPLE
    if good >= 1.0:
        return 1.0
    if good <= 0.0:
        return math.inf
    denom = math.log1p(-good)
    return math.log1p(-confidence) / denom if denom < 0 else math.inf


def robust_pnp(c: CorrespondenceSet, k: Intrinsics, cfg: PnPConfig = PnPConfig(),
               rng: np.random.Generator | None = None, return_info: bool = False):
    """RANSAC over confidence-weighted minimal samples; returns (pose, inlier mask over ``c``)."""
    rng = np.random.default_rng(0) if rng is None else rng
    if len(c) < cfg.min_inliers or len(c) < MIN_SAMPLE:
        raise NoConsensus(f"{len(c)} correspondences, need {max(cfg.min_inliers, MIN_SAMPLE)}")
    work = weighted_sample(c, cfg.n_samples, rng)
    xn = _normalized_rays(k, work.px)
    p = work.conf / work.conf.sum()
    best = (-1, math.inf)
    best_mask = None
    trials = 0
    for trial in range(cfg.max_iter):
        trials = trial + 1
        idx = rng.choice(len(work), size=MIN_SAMPLE, replace=False, p=p)
        try:
            hyp = initial_pose(work.ref3d[idx], xn[idx], work.conf[idx])
        except (DegenerateConfiguration, BehindCamera, np.linalg.LinAlgError):
            continue
        err = reprojection_errors(hyp, k, work.ref3d, work.px)
        mask = err <= cfg.reproj_px
        score = (int(mask.sum()), float(np.sum(err[mask] ** 2)))
        if score[0] > best[0] or (score[0] == best[0] and score[1] < best[1]):
            best, best_mask = score, mask
            if trials >= _required_trials(best[0] / len(work), cfg.confidence):
                break
    if best_mask is None or best[0] < cfg.min_inliers:
        raise NoConsensus(f"best hypothesis has {max(best[0], 0)} inliers, "
                          f"need {cfg.min_inliers}")

    def refit(mask):
        sub = work.subset(mask)
        return solve_pnp(sub, k, sub.conf if cfg.weighted_refit else np.ones(len(sub)))

    try:
        pose = refit(best_mask)
        mask = reprojection_errors(pose, k, work.ref3d, work.px) <= cfg.reproj_px
        if mask.sum() >= cfg.min_inliers and not np.array_equal(mask, best_mask):
            pose = refit(mask)
    except (DegenerateConfiguration, BehindCamera) as e:
        raise NoConsensus(f"refit on consensus set failed: {e}") from e
    full_mask = reprojection_errors(pose, k, c.ref3d, c.px) <= cfg.reproj_px
    if full_mask.sum() < cfg.min_inliers:
        raise NoConsensus(f"refined pose keeps {int(full_mask.sum())} inliers")
    if return_info:
        return pose, full_mask, RansacInfo(trials, best[0], int(full_mask.sum()))
    return pose, full_mask


__all__ = ["PnPConfig", "CorrespondenceSet", "extract_correspondences", "weighted_sample",
           "initial_pose", "refine_pose", "solve_pnp", "robust_pnp", "reprojection_errors",
           "RansacInfo"]
