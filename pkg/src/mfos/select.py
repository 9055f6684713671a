"""Reference-view selection by greedy farthest sampling over viewing directions."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import BadK
from .geom import Pose, geodesic_angle_deg


def view_direction(p: Pose, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    c = p.camera_center() - np.asarray(center, dtype=np.float64)
    return c / np.linalg.norm(c)


def view_distance(a: Pose, b: Pose, center=(0.0, 0.0, 0.0)) -> float:
    """Angle in degrees between the object-to-camera directions of two views."""
    da, db = view_direction(a, center), view_direction(b, center)
    return float(np.degrees(np.arccos(np.clip(da @ db, -1.0, 1.0))))


def distance_matrix(poses: Sequence[Pose], metric: str = "view") -> np.ndarray:
    if metric == "view":
        d = np.stack([view_direction(p) for p in poses])
        return np.degrees(np.arccos(np.clip(d @ d.T, -1.0, 1.0)))
    if metric == "so3":
        n = len(poses)
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                out[i, j] = out[j, i] = geodesic_angle_deg(poses[i].r, poses[j].r)
        return out
    raise ValueError(f"unknown metric {metric!r}")


def _greedy(dist: np.ndarray, chosen: list[int], k: int) -> list[int]:
    n = len(dist)
    chosen = list(chosen)
    if not chosen:
        return chosen
    mind = dist[chosen].min(axis=0)
    mind[chosen] = -np.inf
    while len(chosen) < k:
        nxt = int(np.argmax(mind))  # first maximum -> lowest index on ties
        chosen.append(nxt)
        mind = np.minimum(mind, dist[nxt])
        mind[chosen] = -np.inf
    assert len(set(chosen)) == len(chosen) <= n
    return chosen


def farthest_sample(poses: Sequence[Pose], k: int, seed_idx: int = 0,
                    metric: str = "view") -> list[int]:
    n = len(poses)
    if not 1 <= k <= n:
        raise BadK(f"k={k} must lie in [1, {n}]")
    if not 0 <= seed_idx < n:
        raise BadK(f"seed index {seed_idx} out of range for {n} views")
    return _greedy(distance_matrix(poses, metric), [seed_idx], k)


def train_select(poses: Sequence[Pose], rng: np.random.Generator, n_random: int = 8,
                 n_total: int = 32, metric: str = "view") -> list[int]:
    """``n_random`` uniform picks, completed to ``n_total`` by farthest sampling."""
    n = len(poses)
    if not 0 <= n_random <= n_total <= n or n_total < 1:
        raise BadK(f"need 0 <= n_random={n_random} <= n_total={n_total} <= {n}")
    if n_random:
        chosen = [int(i) for i in rng.choice(n, size=n_random, replace=False)]
    else:
        chosen = [int(rng.integers(n))]
    return _greedy(distance_matrix(poses, metric), chosen, n_total)


def min_pairwise(dist: np.ndarray, idx: Sequence[int]) -> float:
    if len(idx) < 2:
        return np.inf
    sub = dist[np.ix_(idx, idx)]
    return float(sub[~np.eye(len(idx), dtype=bool)].min())
