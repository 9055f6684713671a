import numpy as np
import pytest
from scipy import stats

from mfos.errors import DegenerateConfiguration, NoConsensus, TooFewPoints
from mfos.geom import Intrinsics, Pose, geodesic_angle_deg, project, random_rotation
from mfos.model import PredictionMaps
from mfos.pnp import (CorrespondenceSet, PnPConfig, extract_correspondences, initial_pose,
                      refine_pose, reprojection_errors, robust_pnp, solve_pnp, weighted_sample)

K = Intrinsics(500, 500, 320, 240, 640, 480)


def scene(rng, n=100, planar=False):
    pose = Pose(random_rotation(rng), [rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                                       rng.uniform(0.8, 1.2)])
    x = rng.uniform(-0.1, 0.1, size=(n, 3))
    if planar:
        x[:, 2] = 0.0
    px = project(K, pose.apply(x))
    return pose, CorrespondenceSet(px, x, rng.uniform(0.5, 2.0, size=n))


def errors(a, b):
    return geodesic_angle_deg(a.r, b.r), float(np.linalg.norm(a.t - b.t))


def test_config_defaults():
    c = PnPConfig()
    assert (c.conf_threshold, c.n_samples, c.max_iter, c.reproj_px, c.min_inliers) == \
        (2.5, 1024, 1000, 5.0, 6)
    with pytest.raises(ValueError):
        PnPConfig(reproj_px=0)


def test_extract_correspondences_filter():
    rng = np.random.default_rng(0)
    raw = rng.uniform(-2, 3, size=(6, 7))
    coords = rng.uniform(-1, 1, size=(6, 7, 3))
    c = extract_correspondences(PredictionMaps(coords, raw))
    want = [(x, y) for y in range(6) for x in range(7) if np.exp(raw[y, x]) >= 2.5]
    assert sorted(map(tuple, c.px.astype(int).tolist())) == sorted(want)
    for (x, y), p3 in zip(c.px.astype(int), c.ref3d):
        assert np.array_equal(p3, coords[y, x])


def test_extract_all_or_nothing():
    coords = np.zeros((4, 5, 3))
    assert len(extract_correspondences(PredictionMaps(coords, np.full((4, 5), 2.0)))) == 20
    with pytest.raises(TooFewPoints):
        extract_correspondences(PredictionMaps(coords, np.zeros((4, 5))))


def test_weighted_sample_uniform_when_equal():
    c = CorrespondenceSet(np.zeros((10, 2)), np.zeros((10, 3)), np.ones(10))
    c.px[:, 0] = np.arange(10)
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    for _ in range(100_000 // 10):
        for _ in range(10):
            counts[weighted_sample(c, 3, rng).px[:, 0].astype(int)] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_weighted_sample_heavy_point():
    conf = np.ones(50)
    conf[17] = 1e6
    c = CorrespondenceSet(np.column_stack([np.arange(50), np.zeros(50)]), np.zeros((50, 3)), conf)
    rng = np.random.default_rng(1)
    hits = sum(weighted_sample(c, 1, rng).px[0, 0] == 17 for _ in range(2000))
    assert hits / 2000 > 0.99


def test_weighted_sample_identity_and_scale_invariance():
    rng = np.random.default_rng(2)
    c = CorrespondenceSet(rng.normal(size=(30, 2)), rng.normal(size=(30, 3)), rng.uniform(1, 3, 30))
    assert weighted_sample(c, 30, rng) is c
    scaled = CorrespondenceSet(c.px, c.ref3d, c.conf * 3.0)
    for seed in range(20):
        a = weighted_sample(c, 7, np.random.default_rng(seed))
        b = weighted_sample(scaled, 7, np.random.default_rng(seed))
        assert np.array_equal(a.px, b.px)


@pytest.mark.parametrize("planar", [False, True])
def test_solve_pnp_exact(planar):
    rng = np.random.default_rng(3)
    for _ in range(10):
        gt, c = scene(rng, 50, planar)
        deg, m = errors(solve_pnp(c, K), gt)
        assert deg < (1e-3 if planar else 1e-4) and m < 1e-6


def test_solve_pnp_conf_scaling_invariant():
    rng = np.random.default_rng(4)
    gt, c = scene(rng, 40)
    c.px += rng.normal(scale=0.5, size=c.px.shape)
    a = solve_pnp(c, K)
    b = solve_pnp(CorrespondenceSet(c.px, c.ref3d, c.conf * 7.0), K)
    assert np.allclose(a.r, b.r, atol=1e-9) and np.allclose(a.t, b.t, atol=1e-9)


def test_collinear_is_degenerate():
    x = np.array([[0, 0, 0], [0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], float)
    with pytest.raises(DegenerateConfiguration):
        solve_pnp(CorrespondenceSet(np.zeros((3, 2)), x, np.ones(3)), K)
    x6 = np.outer(np.linspace(0, 1, 6), [0.1, 0.2, 0.3])
    with pytest.raises(DegenerateConfiguration):
        initial_pose(x6, np.zeros((6, 2)), np.ones(6))


def test_refinement_cost_monotone():
    rng = np.random.default_rng(5)
    gt, c = scene(rng, 60)
    c.px += rng.normal(scale=1.0, size=c.px.shape)
    start = Pose(gt.r @ np.array([[1, -0.05, 0], [0.05, 1, 0], [0, 0, 1]]), gt.t + 0.02)
    _, hist = refine_pose(Pose(start.r / np.linalg.norm(start.r, axis=0), start.t), K, c.ref3d,
                          c.px, c.conf)
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert len(hist) > 1


def test_robust_no_outliers_equals_solve():
    rng = np.random.default_rng(6)
    gt, c = scene(rng, 200)
    pose, mask = robust_pnp(c, K, rng=np.random.default_rng(0))
    ref = solve_pnp(c, K)
    assert mask.all()
    assert np.allclose(pose.r, ref.r, atol=1e-6) and np.allclose(pose.t, ref.t, atol=1e-6)


def outlier_scene(seed, n=1000, frac=0.4):
    rng = np.random.default_rng(seed)
    gt, c = scene(rng, n)
    bad = rng.random(n) < frac
    c.px[bad] = rng.uniform([0, 0], [640, 480], size=(bad.sum(), 2))
    return gt, c


def test_robust_with_outliers():
    for seed in range(5):
        gt, c = outlier_scene(seed)
        pose, mask = robust_pnp(c, K, rng=np.random.default_rng(seed))
        deg, m = errors(pose, gt)
        assert deg < 0.5 and m / np.linalg.norm(gt.t) < 1e-3
        assert np.all(reprojection_errors(pose, K, c.ref3d, c.px)[mask] <= 5.0)


def test_robust_all_outliers():
    rng = np.random.default_rng(7)
    x = rng.uniform(-0.1, 0.1, size=(300, 3))
    px = rng.uniform([0, 0], [640, 480], size=(300, 2))
    with pytest.raises(NoConsensus):
        robust_pnp(CorrespondenceSet(px, x, np.ones(300)), K, PnPConfig(min_inliers=30),
                   np.random.default_rng(0))


def test_robust_deterministic():
    gt, c = outlier_scene(11)
    a, _ = robust_pnp(c, K, rng=np.random.default_rng(3))
    b, _ = robust_pnp(c, K, rng=np.random.default_rng(3))
    assert np.array_equal(a.r, b.r) and np.array_equal(a.t, b.t)


def test_to_metric_roundtrip():
    from mfos.geom import RefFrame, ref_coords

    f = RefFrame([0.1, 0, 0], [0.05, 0.1, 0.02], random_rotation(np.random.default_rng(0)))
    x = np.random.default_rng(1).uniform(-0.05, 0.05, size=(5, 3))
    c = CorrespondenceSet(np.zeros((5, 2)), ref_coords(f, x), np.ones(5)).to_metric(f)
    assert np.allclose(c.ref3d, x)
