import itertools
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointskip import kernels
from pointskip.geometry import (
    GeometryError,
    PointCloud,
    ball_query,
    farthest_point_sample,
    gather_features,
    lexicographic_min_index,
    normalize_unit_sphere,
    sample_and_group,
)

from oracles import ball_query_oracle, fps_oracle, sqdist

SQUARE = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)


def cloud(n, seed):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 3))


# -- point cloud / normalisation ----------------------------------------------


def test_point_cloud_rejects_nan_and_bad_features():
    with pytest.raises(GeometryError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((3, 3)), np.zeros((2, 4)))


def test_normalize_single_point_goes_to_origin():
    assert np.array_equal(normalize_unit_sphere(np.array([[3.0, -2.0, 7.0]])).points,
                          np.zeros((1, 3)))


def test_normalize_scaled_cube_corners():
    corners = np.array(list(itertools.product((-1, 1), repeat=3)), dtype=float)
    out = normalize_unit_sphere(5 * corners).points
    np.testing.assert_allclose(out, corners / np.sqrt(3), atol=1e-15)


def test_normalize_random_cloud():
    out = normalize_unit_sphere(cloud(500, 0) * 7 + 3).points
    assert np.all(np.abs(out.mean(axis=0)) < 1e-12)
    assert abs(np.linalg.norm(out, axis=1).max() - 1) < 1e-12


def test_normalize_empty_cloud():
    with pytest.raises(GeometryError):
        normalize_unit_sphere(np.zeros((0, 3)))


# -- farthest point sampling --------------------------------------------------


def test_fps_full_count_is_permutation():
    pts = cloud(40, 1)
    pts[5] = pts[6] = pts[7]  # duplicates must still be picked exactly once
    idx = farthest_point_sample(pts, 40, 3)
    assert sorted(idx.tolist()) == list(range(40))


def test_fps_square_diagonal():
    assert farthest_point_sample(SQUARE, 2, 0).tolist() == [0, 2]


def test_fps_ties_go_to_smallest_coordinates():
    # after 0 and 2, corners 1 (1,0,0) and 3 (0,1,0) tie; 3 is lexicographically smaller
    assert farthest_point_sample(SQUARE, 4, 0).tolist() == [0, 2, 3, 1]


def test_fps_ties_between_duplicates_go_to_smallest_index():
    pts = np.array([[0, 0, 0], [2, 0, 0], [2, 0, 0], [1, 0, 0]], dtype=float)
    assert farthest_point_sample(pts, 2, 0).tolist() == [0, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fps_coordinates_invariant_to_permutation(seed):
    rng = np.random.default_rng(seed)
    pts = rng.integers(-2, 3, size=(40, 3)).astype(float)   # many exact ties
    perm = rng.permutation(40)
    a = pts[farthest_point_sample(pts, 12, lexicographic_min_index(pts))]
    q = pts[perm]
    b = q[farthest_point_sample(q, 12, lexicographic_min_index(q))]
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_fps_matches_brute_force_oracle(seed):
    pts = cloud(64, seed)
    assert farthest_point_sample(pts, 8, 0).tolist() == fps_oracle(pts, 8, 0)


def test_fps_count_errors():
    with pytest.raises(GeometryError):
        farthest_point_sample(SQUARE, 5)
    with pytest.raises(GeometryError):
        farthest_point_sample(SQUARE, 0)
    with pytest.raises(GeometryError):
        farthest_point_sample(SQUARE, 2, start=4)


def _coverage(pts, sel):
    return max(min(np.sqrt(sqdist(p, pts[s])) for s in sel) for p in pts)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 32), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_fps_covering_properties(n, m, seed):
    pts = cloud(n, seed)
    m = min(m, n)
    sel = farthest_point_sample(pts, m, 0).tolist()
    picks = [min(np.sqrt(sqdist(pts[sel[i]], pts[s])) for s in sel[:i]) for i in range(1, m)]
    assert all(a >= b for a, b in zip(picks, picks[1:]))      # pick distances shrink
    cov = _coverage(pts, sel)
    assert cov <= picks[-1] + 1e-12                              # radius <= last pick distance
    if n <= 14 and m <= 4:                                       # 2-approximation of k-center
        best = min(_coverage(pts, c) for c in itertools.combinations(range(n), m))
        assert cov <= 2 * best + 1e-12


def test_fps_last_pick_is_not_swap_optimal_in_general():
    # greedy picks B; replacing it by D covers the set better
    pts = np.array([[0, 0, 0], [10, 0, 0], [0, 9.9, 0], [5, 5, 0]], dtype=float)
    sel = farthest_point_sample(pts, 2, 0).tolist()
    assert sel == [0, 1]
    assert _coverage(pts, [0, 3]) < _coverage(pts, sel)


def test_lexicographic_min_index():
    pts = np.array([[1, 0, 0], [0, 5, 5], [0, 5, 4], [0, 6, 0]], dtype=float)
    assert lexicographic_min_index(pts) == 2


# -- ball query ---------------------------------------------------------------


def test_ball_query_radius_cut():
    pts = np.array([[0.3, 0, 0], [0, 0.6, 0]])
    g = ball_query(pts, np.zeros((1, 3)), 0.5, 4)
    assert g.valid_counts.tolist() == [1]
    assert set(g.indices[0].tolist()) == {0}


def test_ball_query_large_radius_covers_everything():
    pts = cloud(20, 2)
    g = ball_query(pts, pts[:5], 100.0, 32)
    assert g.valid_counts.tolist() == [20] * 5
    for row in g.indices:
        assert set(row[:20].tolist()) == set(range(20))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("method", ["scan", "grid"])
def test_ball_query_matches_exhaustive_scan(seed, method):
    pts = cloud(64, seed)
    centers = pts[np.random.default_rng(seed).choice(64, 8, replace=False)]
    g = ball_query(pts, centers, 0.4, 16, method=method)
    for j in range(8):
        got = g.indices[j, :g.valid_counts[j]].tolist()
        assert set(got) == set(ball_query_oracle(pts, centers[j], 0.4, 16))


def test_ball_query_padding_replicates_nearest():
    pts = cloud(64, 9)
    g = ball_query(pts, pts[:6], 0.3, 40)
    for j in range(6):
        c = g.valid_counts[j]
        assert c < 40
        assert g.indices[j, 0] == j  # the center itself is nearest
        assert np.all(g.indices[j, c:] == g.indices[j, 0])


def test_ball_query_offsets_within_radius():
    pts = cloud(200, 3)
    g = ball_query(pts, pts[:30], 0.35, 16)
    assert np.all(np.linalg.norm(g.grouped_points, axis=-1) <= 0.35 + 1e-12)
    np.testing.assert_array_equal(g.grouped_points, pts[g.indices] - pts[:30, None])


def test_ball_query_parameter_errors():
    with pytest.raises(GeometryError):
        ball_query(SQUARE, SQUARE, 0.0, 4)
    with pytest.raises(GeometryError):
        ball_query(SQUARE, SQUARE, 1.0, 0)


def test_ball_query_empty_neighbourhood():
    with pytest.raises(GeometryError):
        ball_query(SQUARE, np.array([[50.0, 50, 50]]), 0.5, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["scan", "grid"]))
def test_grouping_invariant_to_point_permutation(seed, method):
    rng = np.random.default_rng(seed)
    # integer lattice coordinates create many exact distance ties
    pts = rng.integers(-3, 4, size=(60, 3)).astype(float) / 3
    centers = pts[:5].copy()
    perm = rng.permutation(60)
    a = ball_query(pts, centers, 0.8, 6, method=method)
    b = ball_query(pts[perm], centers, 0.8, 6, method=method)
    assert np.array_equal(a.valid_counts, b.valid_counts)
    assert np.array_equal(a.grouped_points, b.grouped_points)


# -- gather -------------------------------------------------------------------


def test_gather_identity():
    f = np.random.default_rng(0).normal(size=(7, 4))
    assert np.array_equal(gather_features(f, np.arange(7)[:, None])[:, 0], f)


def test_gather_repeated_rows():
    f = np.arange(8.0).reshape(4, 2)
    assert gather_features(f, np.array([[1, 1, 1]])).tolist() == [[[2, 3]] * 3]


def test_gather_matches_loop():
    rng = np.random.default_rng(1)
    f, idx = rng.normal(size=(30, 5)), rng.integers(0, 30, size=(6, 4))
    out = gather_features(f, idx)
    for m in range(6):
        for k in range(4):
            for c in range(5):
                assert out[m, k, c] == f[idx[m, k], c]


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        gather_features(np.zeros((3, 2)), np.array([[0, 3]]))


# -- sample and group ---------------------------------------------------------


def test_sample_and_group_identical_points():
    pts = np.tile([[0.2, -0.4, 0.9]], (8, 1))
    g = sample_and_group(pts, 1, 0.1, 8)
    assert g.grouped_points.shape == (1, 8, 3) and np.all(g.grouped_points == 0)


def test_sample_and_group_square_isolated_centers():
    g = sample_and_group(SQUARE, 2, 0.1, 4)
    assert g.valid_counts.tolist() == [1, 1]
    assert g.indices.tolist() == [[0] * 4, [2] * 4]


def test_sample_and_group_equals_kernel_composition():
    pts = cloud(128, 5)
    feats = np.random.default_rng(5).normal(size=(128, 6))
    g = sample_and_group(PointCloud(pts, feats), 16, 0.5, 12)
    sel = fps_oracle(pts, 16, 0)
    assert g.center_indices.tolist() == sel
    for j, s in enumerate(sel):
        assert set(g.indices[j, :g.valid_counts[j]].tolist()) == set(
            ball_query_oracle(pts, pts[s], 0.5, 12))
    np.testing.assert_array_equal(g.grouped_features, feats[g.indices])
    assert g.rows().shape == (16, 12, 9)
    np.testing.assert_array_equal(g.rows()[..., :3], pts[g.indices] - pts[sel][:, None])


# -- accelerated vs reference paths -------------------------------------------


@pytest.mark.skipif(not kernels.USE_NUMBA, reason="numba path disabled")
@pytest.mark.parametrize("seed", range(4))
def test_numba_and_numpy_paths_identical(seed):
    pts = cloud(300, seed)
    a = kernels.fps_numba(pts, 50, 7)
    b = kernels.fps_numpy(pts, 50, 7)
    assert np.array_equal(a, b)
    for fn in (kernels.ball_query_numpy, kernels.ball_query_grid):
        i1, c1 = kernels.ball_query_numba(pts, pts[a], 0.3, 16)
        i2, c2 = fn(pts, pts[a], 0.3, 16)
        assert np.array_equal(i1, i2) and np.array_equal(c1, c2)


def test_env_flag_selects_numpy_path():
    code = ("import numpy as np; from pointskip import kernels, geometry;"
            "assert not kernels.USE_NUMBA and kernels.fps_numba is None;"
            "p = np.random.default_rng(0).uniform(size=(50, 3));"
            "print(geometry.farthest_point_sample(p, 5).tolist())")
    env = dict(os.environ, POINTSKIP_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    p = np.random.default_rng(0).uniform(size=(50, 3))
    assert out.stdout.strip() == str(farthest_point_sample(p, 5).tolist())
