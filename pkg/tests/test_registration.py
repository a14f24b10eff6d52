import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_transform
from geotr.cloud import RigidTransform
from geotr.errors import ConfigError, EstimationError
from geotr.experiments import planted_correspondences
from geotr.registration import (
    EstimatorConfig, count_inliers, local_to_global, ransac_estimate, svd_top_estimate, weighted_svd,
)


def rot_err(a, b):
    # Frobenius distance is sqrt(2) * angle for small angles, and stays accurate near zero
    return np.linalg.norm(a.rotation - b.rotation) / math.sqrt(2)


def objective(t, src, dst, w):
    return float((w * ((t.apply(src) - dst) ** 2).sum(axis=1)).sum())


# --- weighted SVD ------------------------------------------------------------


def test_aligned_pairs_give_identity(rng):
    pts = rng.normal(size=(10, 3))
    t = weighted_svd(pts, pts)
    assert np.abs(t.rotation - np.eye(3)).max() < 1e-9
    assert np.abs(t.translation).max() < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_recovers_planted_transform(backend, seed):
    rng = np.random.default_rng(seed)
    t_true = random_transform(rng)
    src = rng.normal(size=(10, 3))
    t = weighted_svd(src, t_true.apply(src))
    assert rot_err(t, t_true) < 1e-9
    assert np.linalg.norm(t.translation - t_true.translation) < 1e-9
    assert t.is_valid()


def test_zero_weight_outlier_is_ignored(rng):
    t_true = random_transform(rng)
    src = rng.normal(size=(10, 3))
    dst = t_true.apply(src)
    dst[3] += 5.0
    w = np.ones(10)
    w[3] = 0.0
    t = weighted_svd(src, dst, w)
    assert rot_err(t, t_true) < 1e-9
    assert np.linalg.norm(t.translation - t_true.translation) < 1e-9


def test_reflection_is_corrected():
    src = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]])
    t = weighted_svd(src, src * np.array([1, 1, -1]))
    assert t.is_valid()
    assert np.linalg.det(t.rotation) == pytest.approx(1.0)


@pytest.mark.parametrize("n", [0, 1, 2])
def test_too_few_pairs(n):
    with pytest.raises(EstimationError):
        weighted_svd(np.zeros((n, 3)), np.zeros((n, 3)))


def test_all_zero_weights(rng):
    pts = rng.normal(size=(5, 3))
    with pytest.raises(EstimationError):
        weighted_svd(pts, pts, np.zeros(5))


def test_collinear_points_are_degenerate():
    line = np.outer(np.arange(6.0), [1, 2, 3])
    with pytest.raises(EstimationError) as exc:
        weighted_svd(line, line + 1)
    assert exc.value.degenerate


@given(st.integers(0, 10_000))
def test_weighted_svd_is_locally_optimal(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(12, 3))
    dst = random_transform(rng).apply(src) + rng.normal(0, 0.1, (12, 3))
    w = rng.uniform(0.1, 2.0, 12)
    t = weighted_svd(src, dst, w)
    best = objective(t, src, dst, w)
    for _ in range(100):
        d = RigidTransform.from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.05), rng.normal(0, 0.01, 3))
        assert objective(d.compose(t), src, dst, w) >= best - 1e-12


@given(st.integers(0, 10_000))
def test_weighted_svd_equivariance(seed):
    rng = np.random.default_rng(seed)
    t, ta, tb = (random_transform(rng) for _ in range(3))
    src = rng.normal(size=(15, 3))
    dst = t.apply(src) + rng.normal(0, 0.02, (15, 3))
    w = rng.uniform(0.1, 1.0, 15)
    base = weighted_svd(src, dst, w)
    moved = weighted_svd(ta.apply(src), tb.apply(dst), w)
    expect = tb.compose(base).compose(ta.inverse())
    assert np.abs(moved.matrix() - expect.matrix()).max() < 1e-6


# --- inlier counting -----------------------------------------------------------


def test_exact_pairs_are_all_inliers(rng):
    t = random_transform(rng)
    src = rng.normal(size=(20, 3))
    assert count_inliers(src, t.apply(src), t, 0.1) == 20


def test_far_clouds_have_no_inliers(rng):
    src = rng.normal(size=(20, 3))
    assert count_inliers(src, src + 100, RigidTransform.identity(), 0.1) == 0


def test_hand_built_inlier_count(backend):
    src = np.zeros((5, 3))
    dst = np.array([[0, 0, 0], [0.05, 0, 0], [0, 0.099, 0], [0, 0, 0.1], [0.3, 0.4, 0]])
    # 0.1 sits on the boundary and is excluded by the strict comparison
    assert count_inliers(src, dst, RigidTransform.identity(), 0.1) == 3


# --- local-to-global -------------------------------------------------------------


def test_lgr_single_exact_group(rng):
    t_true = random_transform(rng)
    src = rng.normal(size=(8, 3))
    res = local_to_global(src, t_true.apply(src), np.ones(8), np.zeros(8, int))
    assert rot_err(res.transform, t_true) < 1e-9
    assert res.inliers.tolist() == list(range(8))


def test_lgr_picks_majority_candidate(rng):
    t_true, t_bad = random_transform(rng), random_transform(rng)
    src = rng.normal(size=(100, 3))
    dst = t_true.apply(src)
    dst[70:] = t_bad.apply(src[70:])
    group = np.array([0] * 70 + [1] * 30)
    # give the outlier cluster higher scores: the choice must come from inlier counts
    scores = np.where(group == 1, 1.0, 0.1)
    res = local_to_global(src, dst, scores, group)
    assert res.candidate_group == 0
    assert rot_err(res.transform, t_true) < 1e-9
    assert len(res.inliers) == 70


def test_lgr_without_refinement_returns_local_candidate():
    ps = planted_correspondences(3, n_groups=40, noise=0.03)
    res = local_to_global(ps.src, ps.dst, ps.scores, ps.group_of, EstimatorConfig(n_refine=0))
    sel = ps.group_of == res.candidate_group
    local = weighted_svd(ps.src[sel], ps.dst[sel], ps.scores[sel])
    assert np.abs(res.transform.matrix() - local.matrix()).max() < 1e-12
    assert res.inlier_history == [len(res.inliers)]


def test_lgr_tie_prefers_smaller_residual(rng):
    t_true = random_transform(rng)
    src = rng.normal(size=(10, 3)) * 0.01
    dst = t_true.apply(src)
    noisy = dst + rng.normal(0, 0.01, dst.shape)
    src2, dst2 = np.concatenate([src, src]), np.concatenate([noisy, dst])
    # both groups explain all 20 pairs at tau_a = 1, the exact one has lower residual
    res = local_to_global(src2, dst2, np.ones(20), np.array([0] * 10 + [1] * 10),
                          EstimatorConfig(tau_a=1.0, n_refine=0))
    assert res.candidate_group == 1


def test_lgr_skips_small_and_degenerate_groups(rng):
    t_true = random_transform(rng)
    src = rng.normal(size=(12, 3))
    src[:4] = np.outer(np.arange(4.0), [1, 0, 0])  # collinear group
    dst = t_true.apply(src)
    group = np.array([0] * 4 + [1] * 2 + [2] * 6)
    res = local_to_global(src, dst, np.ones(12), group)
    assert res.num_candidates == 1 and res.candidate_group == 2


def test_lgr_without_candidates_raises():
    with pytest.raises(EstimationError):
        local_to_global(np.zeros((4, 3)), np.zeros((4, 3)), np.ones(4), np.arange(4))


@pytest.mark.parametrize("seed", range(10))
def test_lgr_refinement_is_monotone(seed):
    ps = planted_correspondences(seed, n_groups=60, noise=0.03, outlier_groups_consistent=True)
    res = local_to_global(ps.src, ps.dst, ps.scores, ps.group_of, EstimatorConfig(n_refine=10))
    assert len(res.inlier_history) == 11
    assert all(a <= b for a, b in zip(res.inlier_history, res.inlier_history[1:]))


@given(st.integers(0, 10_000))
def test_lgr_equivariance(seed):
    rng = np.random.default_rng(seed)
    ps = planted_correspondences(seed % 50, n_groups=20, noise=0.0)
    ta, tb = random_transform(rng), random_transform(rng)
    base = local_to_global(ps.src, ps.dst, ps.scores, ps.group_of)
    moved = local_to_global(ta.apply(ps.src), tb.apply(ps.dst), ps.scores, ps.group_of)
    expect = tb.compose(base.transform).compose(ta.inverse())
    assert np.abs(moved.transform.matrix() - expect.matrix()).max() < 1e-6


def test_config_validation():
    with pytest.raises(ConfigError):
        EstimatorConfig(tau_a=0)
    with pytest.raises(ConfigError):
        EstimatorConfig(n_refine=-1)


# --- RANSAC ------------------------------------------------------------------------


def test_ransac_all_inliers(rng):
    t_true = random_transform(rng)
    src = rng.normal(size=(30, 3))
    t = ransac_estimate(src, t_true.apply(src), EstimatorConfig(ransac_iters=5), seed=1)
    assert rot_err(t, t_true) < 1e-9


def test_ransac_half_outliers(backend, rng):
    t_true = random_transform(rng)
    src = rng.normal(size=(200, 3))
    dst = t_true.apply(src)
    dst[::2] = rng.uniform(-3, 3, (100, 3))
    t = ransac_estimate(src, dst, EstimatorConfig(ransac_iters=1000), seed=4)
    assert np.abs(t.matrix() - t_true.matrix()).max() < 1e-3


def test_ransac_is_deterministic():
    ps = planted_correspondences(2, n_groups=30)
    cfg = EstimatorConfig(ransac_iters=500)
    a = ransac_estimate(ps.src, ps.dst, cfg, seed=9)
    b = ransac_estimate(ps.src, ps.dst, cfg, seed=9)
    assert a.matrix().tobytes() == b.matrix().tobytes()


def test_ransac_too_few_pairs():
    with pytest.raises(EstimationError):
        ransac_estimate(np.zeros((2, 3)), np.zeros((2, 3)))


def test_svd_top_uses_best_scores(rng):
    t_true = random_transform(rng)
    src = rng.normal(size=(300, 3))
    dst = t_true.apply(src)
    scores = rng.uniform(0.5, 1.0, 300)
    dst[:50] += 3.0
    scores[:50] = 0.01
    t = svd_top_estimate(src, dst, scores)
    assert rot_err(t, t_true) < 1e-9


def test_lgr_much_faster_than_ransac():
    ps = planted_correspondences(0)
    start = time.perf_counter()
    local_to_global(ps.src, ps.dst, ps.scores, ps.group_of)
    lgr = time.perf_counter() - start
    start = time.perf_counter()
    ransac_estimate(ps.src, ps.dst, EstimatorConfig(), seed=0)
    ransac = time.perf_counter() - start
    assert lgr < ransac / 20
