import numpy as np
import pytest

from flow3d.core import KTooLarge, MTooLarge, InvalidRadius, PointCloud, rng_from
from flow3d.spatial import farthest_point_sample, knn, radius_neighbors

from conftest import brute_fps, brute_knn, brute_radius, random_cloud


def test_radius_neighbors_basic():
    src = PointCloud([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    out = radius_neighbors(src, np.array([[0.0, 0, 0]]), 1.5)
    assert list(out.group(0)) == [0, 1]


def test_radius_zero_includes_coincident():
    src = PointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    out = radius_neighbors(src, np.array([[2.0, 0, 0]]), 0.0)
    assert list(out.group(0)) == [2]


def test_radius_negative_raises():
    with pytest.raises(InvalidRadius):
        radius_neighbors(PointCloud(np.zeros((1, 3))), np.zeros((1, 3)), -1.0)


def test_radius_neighbors_matches_brute_force(rng):
    # large-N instances force the voxel-grid path (n*m > 4096)
    for trial in range(110):
        n = int(rng.integers(5, 60)) if trial < 80 else int(rng.integers(500, 700))
        m = int(rng.integers(1, 12)) if trial < 80 else int(rng.integers(10, 20))
        src = rng.uniform(0, 1, size=(n, 3))
        q = rng.uniform(0, 1, size=(m, 3))
        r = float(rng.uniform(0.05, 0.4))
        got = radius_neighbors(PointCloud(src), q, r)
        want = brute_radius(src, q, r)
        for j in range(m):
            assert np.array_equal(got.group(j), want[j])


def test_radius_neighbors_cap_is_subset_and_deterministic(rng):
    src = rng.uniform(0, 1, size=(300, 3))
    q = rng.uniform(0, 1, size=(20, 3))
    a = radius_neighbors(PointCloud(src), q, 0.5, cap=8, seed=9)
    b = radius_neighbors(PointCloud(src), q, 0.5, cap=8, seed=9)
    full = brute_radius(src, q, 0.5)
    assert np.array_equal(a.indices, b.indices)
    for j in range(20):
        g = a.group(j)
        assert len(g) == min(8, len(full[j]))
        assert set(g) <= set(full[j])
        assert np.all(np.diff(g) > 0)  # sorted, no duplicates


def test_radius_neighbors_monotone_in_radius(rng):
    src = rng.uniform(0, 1, size=(100, 3))
    q = rng.uniform(0, 1, size=(10, 3))
    small = radius_neighbors(PointCloud(src), q, 0.2)
    big = radius_neighbors(PointCloud(src), q, 0.35)
    for j in range(10):
        assert set(small.group(j)) <= set(big.group(j))


def test_knn_self_query():
    src = rng_from(0).uniform(size=(20, 3))
    out = knn(PointCloud(src), src, 1)
    assert np.array_equal(out[:, 0], np.arange(20))


def test_knn_collinear_example():
    src = PointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0], [4, 0, 0]])
    out = knn(src, np.array([[2.9, 0, 0]]), 2)
    assert list(out[0]) == [2, 3]


def test_knn_too_large():
    with pytest.raises(KTooLarge):
        knn(PointCloud(np.zeros((2, 3))), np.zeros((1, 3)), 3)


def test_knn_matches_brute_force_with_ties(rng):
    for trial in range(110):
        n = int(rng.integers(4, 40))
        m = int(rng.integers(1, 10))
        # quantized coordinates generate genuine distance ties
        src = np.round(rng.uniform(0, 1, size=(n, 3)) * 4) / 4
        q = np.round(rng.uniform(0, 1, size=(m, 3)) * 4) / 4
        k = int(rng.integers(1, n + 1))
        got = knn(PointCloud(src), q, k)
        want = brute_knn(src, q, k)
        assert np.array_equal(got, want)


def test_fps_collinear():
    pts = PointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    for seed in range(30):
        out = farthest_point_sample(pts, 2, seed)
        if out[0] == 0:
            assert out[1] == 3
            break
    else:
        pytest.fail("no seed started at index 0")


def test_fps_exhaustive_is_permutation(rng):
    pts = PointCloud(rng.uniform(size=(17, 3)))
    out = farthest_point_sample(pts, 17, 3)
    assert sorted(out) == list(range(17))


def test_fps_m_too_large():
    with pytest.raises(MTooLarge):
        farthest_point_sample(PointCloud(np.zeros((3, 3))), 4)


def test_fps_handles_duplicate_points():
    pts = PointCloud(np.zeros((6, 3)))
    out = farthest_point_sample(pts, 6, 0)
    assert sorted(out) == list(range(6))


def test_fps_matches_greedy_oracle(rng):
    for trial in range(100):
        n = int(rng.integers(5, 40))
        m = int(rng.integers(1, n + 1))
        pts = rng.uniform(size=(n, 3))
        seed = int(rng.integers(0, 1 << 30))
        got = farthest_point_sample(PointCloud(pts), m, seed)
        want = brute_fps(pts, m, int(got[0]))
        assert np.array_equal(got, want)


def test_fps_anti_clustering(rng):
    """FPS min pairwise distance beats a uniform random subset's on average."""
    pts = rng.uniform(size=(200, 3))
    cloud = PointCloud(pts)

    def min_pair(idx):
        sub = pts[idx]
        d = np.linalg.norm(sub[:, None] - sub[None, :], axis=2)
        return d[~np.eye(len(idx), dtype=bool)].min()

    fps_scores, rand_scores = [], []
    for seed in range(50):
        fps_scores.append(min_pair(farthest_point_sample(cloud, 16, seed)))
        rand_scores.append(min_pair(rng_from(seed).choice(200, 16, replace=False)))
    assert np.mean(fps_scores) > np.mean(rand_scores)
