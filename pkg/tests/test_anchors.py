
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birddet.anchors import (AnchorSet, box_distance, inertia_of, kmeans_run, kmeanspp_seed,
                             mean_best_iou, mine_anchors, read_anchors, write_anchors)
from birddet.geometry import BBox
from oracles import best_partition_sse


def mixed_scale(seed=0, counts=(60, 5, 40, 3, 80, 8, 30, 4, 50)):
    """Nine (scale, aspect) modes with uneven populations."""
    rng = np.random.default_rng(seed)
    modes = [(s * a ** 0.5, s / a ** 0.5) for s in (0.03, 0.1, 0.3) for a in (0.5, 1, 2)]
    parts = [np.column_stack([w * np.exp(rng.normal(0, 0.05, n)), h * np.exp(rng.normal(0, 0.05, n))])
             for (w, h), n in zip(modes, counts)]
    return np.vstack(parts)


def two_clusters(rng, n=20):
    a = rng.normal([0.1, 0.1], 0.005, size=(n, 2))
    b = rng.normal([0.8, 0.8], 0.005, size=(n, 2))
    return np.clip(np.vstack([a, b]), 1e-3, 1)


class TestDistance:
    @pytest.mark.parametrize("metric", ["iou", "euclidean"])
    def test_identity(self, metric):
        assert box_distance((0.3, 0.2), (0.3, 0.2), metric) == 0.0

    def test_closed_form(self):
        assert box_distance((0.2, 0.2), (0.4, 0.4), "iou") == pytest.approx(0.75, abs=1e-15)
        assert box_distance((0.2, 0.2), (0.4, 0.4), "euclidean") == pytest.approx(np.sqrt(0.08), abs=1e-15)

    def test_accepts_bbox(self):
        assert box_distance(BBox(0.5, 0.5, 0.2, 0.2), BBox(0.1, 0.9, 0.4, 0.4)) == pytest.approx(0.75)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.01, 1))
    def test_iou_range(self, w1, h1, w2, h2):
        d = box_distance((w1, h1), (w2, h2))
        assert 0 <= d < 1
        assert d == pytest.approx(box_distance((w2, h2), (w1, h1)), abs=1e-15)

    def test_invalid_metric_and_box(self):
        with pytest.raises(ValueError):
            box_distance((0.1, 0.1), (0.2, 0.2), "cosine")
        with pytest.raises(ValueError):
            box_distance((0.0, 0.1), (0.2, 0.2))


class TestSeeding:
    def test_k1_uniform(self):
        pts = np.array([[0.1, 0.1], [0.2, 0.3], [0.5, 0.5], [0.9, 0.4]])
        picks = [int(np.flatnonzero((pts == kmeanspp_seed(pts, 1, rng=s)[0]).all(axis=1))[0])
                 for s in range(4000)]
        freq = np.bincount(picks, minlength=4) / 4000
        np.testing.assert_allclose(freq, 0.25, atol=0.03)

    def test_identical_boxes(self):
        pts = np.tile([0.3, 0.4], (7, 1))
        np.testing.assert_array_equal(kmeanspp_seed(pts, 3, rng=1), np.tile([0.3, 0.4], (3, 1)))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            kmeanspp_seed(np.zeros((0, 2)), 2)

    def test_separated_clusters(self):
        rng = np.random.default_rng(0)
        pts = two_clusters(rng)
        split = sum(int((kmeanspp_seed(pts, 2, "iou", rng=s)[:, 0] > 0.5).sum() == 1) for s in range(1000))
        assert split >= 990

    def test_d_squared_probabilities(self):
        # first center forced by having a single candidate, then D^2 over the rest
        pts = np.array([[0.1, 0.1], [0.2, 0.1], [0.4, 0.1], [0.5, 0.5]])
        d = np.sqrt(((pts - pts[0]) ** 2).sum(axis=1))
        want = d ** 2 / (d ** 2).sum()
        counts = np.zeros(4)
        n = 0
        for s in range(6000):
            c = kmeanspp_seed(pts, 2, "euclidean", rng=s)
            if np.array_equal(c[0], pts[0]):
                counts[np.flatnonzero((pts == c[1]).all(axis=1))[0]] += 1
                n += 1
        np.testing.assert_allclose(counts / n, want, atol=0.04)

    def test_deterministic(self):
        pts = mixed_scale()
        np.testing.assert_array_equal(kmeanspp_seed(pts, 9, rng=5), kmeanspp_seed(pts, 9, rng=5))


class TestKmeansRun:
    @pytest.mark.parametrize("metric", ["iou", "euclidean"])
    def test_exact_fit(self, metric):
        pts = np.array([[0.1, 0.2], [0.3, 0.3], [0.6, 0.4]])
        res = kmeans_run(np.repeat(pts, 3, axis=0), pts[::-1], metric)
        assert res.inertia == 0.0
        np.testing.assert_array_equal(res.anchors, pts)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.sampled_from(["iou", "euclidean"]))
    def test_inertia_non_increasing(self, seed, k, metric):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0.01, 1, size=(30, 2))
        res = kmeans_run(pts, rng.uniform(0.01, 1, size=(k, 2)), metric)
        assert all(b <= a for a, b in zip(res.history, res.history[1:]))
        assert res.inertia == pytest.approx(inertia_of(pts, res.anchors, metric), rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_exhaustive_partition(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.vstack([rng.normal([0.15, 0.2], 0.03, size=(3, 2)), rng.normal([0.6, 0.5], 0.03, size=(3, 2))])
        res = mine_anchors(pts, 2, "euclidean", seed=seed)
        assert res.inertia == pytest.approx(best_partition_sse(pts), abs=1e-12)

    def test_empty_cluster_reseeded(self):
        pts = np.array([[0.1, 0.1], [0.12, 0.1], [0.8, 0.8], [0.82, 0.8]])
        # second center far from everything, so it starts empty
        res = kmeans_run(pts, [[0.11, 0.1], [0.05, 0.99]], "euclidean")
        assert res.inertia < 1e-3
        assert res.anchors[1, 0] > 0.5

    def test_sorted_by_area(self):
        res = mine_anchors(mixed_scale(), 9, seed=0)
        area = res.anchors.prod(axis=1)
        assert np.all(np.diff(area) >= 0)


class TestMineAnchors:
    def test_single_size(self):
        res = mine_anchors(np.tile([0.2, 0.1], (12, 1)), k=4, seed=3)
        np.testing.assert_array_equal(res.anchors, np.tile([0.2, 0.1], (4, 1)))
        assert res.inertia == 0.0

    def test_k_covers_distinct_sizes(self):
        sizes = np.array([[0.05, 0.04], [0.1, 0.2], [0.3, 0.3], [0.5, 0.2]])
        pts = np.repeat(sizes, [5, 3, 7, 2], axis=0)
        for metric in ("iou", "euclidean"):
            assert mine_anchors(pts, 4, metric, seed=0).inertia == 0.0

    def test_same_seed_same_bytes(self, tmp_path):
        pts = mixed_scale(1)
        for name in ("a", "b"):
            write_anchors(tmp_path / name, mine_anchors(pts, 9, seed=11))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    @pytest.mark.parametrize("seed", range(10))
    def test_beats_random_restarts(self, seed):
        # equal effort: best of 10 k-means++ runs vs best of 10 uniform-init runs
        pts = mixed_scale()
        pp = min(mine_anchors(pts, 9, seed=seed * 10 + j).inertia for j in range(10))
        rnd = min(mine_anchors(pts, 9, seed=1000 + seed * 10 + j, init="random").inertia for j in range(10))
        assert pp <= rnd

    def test_mean_inertia_beats_random_seeding(self):
        pts = mixed_scale()
        pp = np.mean([mine_anchors(pts, 9, seed=s).inertia for s in range(100)])
        rnd = np.mean([mine_anchors(pts, 9, seed=s, init="random").inertia for s in range(100)])
        assert pp <= rnd

    def test_bad_init(self):
        with pytest.raises(ValueError):
            mine_anchors(mixed_scale(), 3, init="grid")


class TestMeanBestIou:
    def test_perfect(self):
        sizes = np.array([[0.1, 0.2], [0.3, 0.3]])
        assert mean_best_iou(np.repeat(sizes, 3, axis=0), sizes) == 1.0

    def test_closed_form(self):
        assert mean_best_iou([(0.4, 0.4)], [(0.2, 0.2)]) == pytest.approx(0.25, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            mean_best_iou(np.zeros((0, 2)), [(0.2, 0.2)])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_adding_anchor_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0.01, 1, size=(15, 2))
        anchors = rng.uniform(0.01, 1, size=(3, 2))
        more = np.vstack([anchors, rng.uniform(0.01, 1, size=(1, 2))])
        assert mean_best_iou(pts, more) >= mean_best_iou(pts, anchors)


def test_anchor_file_round_trip(tmp_path):
    res = mine_anchors(mixed_scale(2), 9, seed=4)
    write_anchors(tmp_path / "a.txt", res, extra={"mean_best_iou": 0.5})
    back = read_anchors(tmp_path / "a.txt")
    assert isinstance(back, AnchorSet)
    np.testing.assert_array_equal(back.anchors, res.anchors)
    assert (back.metric, back.seed, back.inertia) == ("iou", 4, res.inertia)
