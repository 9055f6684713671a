import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfos.errors import BadK
from mfos.geom import Pose, look_at, random_rotation
from mfos.select import (distance_matrix, farthest_sample, min_pairwise, train_select,
                         view_distance)


def ring(angles_deg, radius=1.0):
    return [look_at([radius * math.cos(math.radians(a)), radius * math.sin(math.radians(a)), 0],
                    [0, 0, 0]) for a in angles_deg]


def random_poses(rng, n):
    out = []
    for _ in range(n):
        r = random_rotation(rng)
        out.append(Pose(r, [0, 0, rng.uniform(0.5, 2.0)]))
    return out


def greedy_trace(poses, k, seed):
    """Plain re-implementation with explicit loops over view_distance."""
    chosen = [seed]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(len(poses)):
            if i in chosen:
                continue
            d = min(view_distance(poses[i], poses[j]) for j in chosen)
            if d > best_d + 1e-9:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_view_distance_basic():
    a, b = ring([0, 180])
    assert view_distance(a, a) == pytest.approx(0.0, abs=1e-6)
    assert view_distance(a, b) == pytest.approx(180.0, abs=1e-6)


def test_view_distance_oracle(rng):
    for _ in range(20):
        a, b = random_poses(rng, 2)
        ca, cb = -a.r.T @ a.t, -b.r.T @ b.t
        want = math.degrees(math.acos(np.clip(ca @ cb / np.linalg.norm(ca) / np.linalg.norm(cb),
                                              -1, 1)))
        assert view_distance(a, b) == pytest.approx(want, abs=1e-6)


def test_forced_antipodal_pair():
    assert sorted(farthest_sample(ring([0, 90, 180]), 2, 0)) == [0, 2]


def test_all_views_and_bad_k(rng):
    poses = random_poses(rng, 7)
    assert sorted(farthest_sample(poses, 7)) == list(range(7))
    for k in (0, 8):
        with pytest.raises(BadK):
            farthest_sample(poses, k)
    with pytest.raises(BadK):
        farthest_sample(poses, 2, seed_idx=7)


def test_greedy_trace_oracle(rng):
    for _ in range(20):
        poses = random_poses(rng, 15)
        seed = int(rng.integers(15))
        got = farthest_sample(poses, 4, seed)
        want = greedy_trace(poses, 4, seed)
        assert got[0] == seed
        d = distance_matrix(poses)
        assert min_pairwise(d, got) == pytest.approx(min_pairwise(d, want), abs=1e-9)


def test_properties_on_random_sets(rng):
    for _ in range(100):
        n = int(rng.integers(4, 20))
        poses = random_poses(rng, n)
        d = distance_matrix(poses)
        prev = math.inf
        for k in range(1, n + 1):
            idx = farthest_sample(poses, k)
            assert len(set(idx)) == k
            cur = min_pairwise(d, idx)
            assert cur <= prev + 1e-9
            prev = cur


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_global_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    poses = random_poses(rng, 12)
    g = random_rotation(rng)
    # rotating the object by g: X' = g X, so each camera sees R g^T
    rotated = [Pose(p.r @ g.T, p.t) for p in poses]
    assert farthest_sample(poses, 5) == farthest_sample(rotated, 5)


def test_train_select_cases(rng):
    poses = random_poses(rng, 40)
    full = train_select(poses, np.random.default_rng(3), n_random=10, n_total=10)
    again = np.random.default_rng(3).choice(40, size=10, replace=False)
    assert full == [int(i) for i in again]

    pure = train_select(poses, np.random.default_rng(4), n_random=0, n_total=6)
    assert pure == farthest_sample(poses, 6, pure[0])

    for _ in range(30):
        idx = train_select(poses, rng, n_random=8, n_total=32)
        assert len(idx) == 32 == len(set(idx))
    with pytest.raises(BadK):
        train_select(poses, rng, n_random=8, n_total=41)


def test_so3_metric_available(rng):
    poses = random_poses(rng, 6)
    assert len(farthest_sample(poses, 3, metric="so3")) == 3
    with pytest.raises(ValueError):
        distance_matrix(poses, "nope")
