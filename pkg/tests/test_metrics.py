import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birddet.geometry import BBox, Detection
from birddet.metrics import (average_precision, evaluate, match_detections, mean_ap,
                             precision_recall)
from oracles import ap_oracle


def box(cx, cy, cls=0, w=0.1, h=0.1):
    return BBox(cx, cy, w, h, cls)


class TestMatching:
    def test_perfect_detector(self):
        gt = {"a": [box(0.2, 0.2), box(0.6, 0.6, 1)], "b": [box(0.5, 0.5)]}
        dets = [Detection(g, 0.9, img) for img, gs in gt.items() for g in gs]
        m = match_detections(dets, gt)
        assert m.counts() == (3, 0, 0)
        assert all(r.tp for r in m.records)
        assert m.unmatched_per_image == {"a": 0, "b": 0}

    def test_silent_detector(self):
        gt = {"a": [box(0.2, 0.2), box(0.6, 0.6)], "b": [box(0.5, 0.5)]}
        m = match_detections([], gt)
        assert m.counts() == (0, 0, 3)
        assert m.unmatched_per_image == {"a": 2, "b": 1}

    def test_one_to_one(self):
        gt = {"a": [box(0.5, 0.5)]}
        lo = Detection(box(0.51, 0.5), 0.6, "a")
        hi = Detection(box(0.5, 0.51), 0.8, "a")
        m = match_detections([lo, hi], gt)
        assert [(r.index, r.tp) for r in m.records] == [(1, True), (0, False)]
        assert m.counts() == (1, 1, 0)

    def test_class_and_threshold(self):
        gt = {"a": [box(0.5, 0.5, cls=1)]}
        assert match_detections([Detection(box(0.5, 0.5, cls=0), 0.9, "a")], gt).counts(0) == (0, 1, 0)
        shifted = Detection(box(0.55, 0.5, cls=1), 0.9, "a")  # IoU = 1/3
        assert match_detections([shifted], gt, 0.5).counts(1) == (0, 1, 1)
        assert match_detections([shifted], gt, 0.3).counts(1) == (1, 0, 0)

    def test_ties_by_input_order(self):
        gt = {"a": [box(0.5, 0.5)]}
        dets = [Detection(box(0.5, 0.5), 0.7, "a"), Detection(box(0.5, 0.5), 0.7, "a")]
        assert [r.tp for r in match_detections(dets, gt).records] == [True, False]
        assert match_detections(dets, gt).records[0].index == 0

    def test_unknown_image(self):
        with pytest.raises(KeyError):
            match_detections([Detection(box(0.5, 0.5), 0.5, "zz")], {"a": []})


class TestPrecisionRecall:
    def test_formula(self):
        assert precision_recall(8, 2, 2) == (0.8, 0.8)
        assert precision_recall(5, 0, 0) == (1.0, 1.0)
        assert precision_recall(0, 0, 4) == (0.0, 0.0)
        assert precision_recall(0, 0, 0) == (0.0, 0.0)


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([True] * 4, [0.9, 0.8, 0.7, 0.6], 4) == 1.0

    def test_zero_tp(self):
        assert average_precision([False, False], [0.9, 0.5], 3) == 0.0
        assert average_precision([], [], 3) == 0.0

    def test_hand_example(self):
        ap = average_precision([True, False, True], [0.9, 0.8, 0.7], 2)
        assert ap == pytest.approx(5 / 6, abs=1e-15)
        assert round(ap, 5) == 0.83333

    def test_no_ground_truth(self):
        assert average_precision([False], [0.5], 0) is None

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 21))
        flags = [bool(f) for f in rng.random(n) < 0.5]
        n_gt = max(sum(flags) + int(rng.integers(0, 4)), 1)
        scores = [float(s) for s in rng.random(n)]
        assert average_precision(flags, scores, n_gt) == pytest.approx(ap_oracle(flags, scores, n_gt), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.floats(0.01, 0.99)), min_size=1, max_size=15,
                    unique_by=lambda t: t[1]))
    def test_monotone_rescaling_invariant(self, items):
        flags, scores = zip(*items)
        n_gt = sum(flags) + 1
        a = average_precision(flags, scores, n_gt)
        assert average_precision(flags, [s ** 3 for s in scores], n_gt) == a
        assert 0 <= a <= 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.floats(0.01, 0.99)), min_size=1, max_size=15),
           st.floats(0, 1))
    def test_extra_false_positive_never_helps(self, items, s):
        flags, scores = zip(*items)
        n_gt = sum(flags) + 1
        base = average_precision(flags, scores, n_gt)
        assert average_precision(flags + (False,), scores + (s,), n_gt) <= base + 1e-15


class TestMeanAp:
    def test_values(self):
        assert mean_ap([0.7]) == 0.7
        assert mean_ap([1.0, 0.5]) == 0.75
        assert mean_ap([1.0, None, 0.5]) == 0.75

    def test_empty(self):
        with pytest.raises(ValueError):
            mean_ap([None])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
    def test_bounds_and_order(self, aps):
        m = mean_ap(aps)
        assert min(aps) - 1e-15 <= m <= max(aps) + 1e-15
        assert mean_ap(sorted(aps)) == pytest.approx(m, abs=1e-15)


class TestEvaluate:
    def scene(self):
        gt = {"a": [box(0.2, 0.2, 0), box(0.6, 0.6, 1)], "b": [box(0.4, 0.4, 0)]}
        dets = [Detection(box(0.2, 0.2, 0), 0.9, "a"), Detection(box(0.8, 0.8, 0), 0.8, "a"),
                Detection(box(0.4, 0.4, 0), 0.7, "b"), Detection(box(0.6, 0.6, 1), 0.6, "a"),
                Detection(box(0.1, 0.9, 2), 0.5, "b")]
        return dets, gt

    def test_report(self):
        dets, gt = self.scene()
        rep = evaluate(dets, gt)
        assert rep.num_classes == 2
        assert rep.classes[0].ap == pytest.approx(5 / 6)
        assert rep.classes[1].ap == 1.0
        assert rep.classes[2].ap is None and rep.flagged
        assert rep.map == pytest.approx((5 / 6 + 1) / 2)
        assert (rep.classes[0].precision, rep.classes[0].recall) == (pytest.approx(2 / 3), 1.0)
        d = json.loads(rep.to_json())
        assert d["num_classes"] == 2 and d["iou_threshold"] == 0.5
        assert "mAP" in rep.summary("ours") and "ours" in rep.summary("ours")

    def test_class_order_irrelevant(self):
        dets, gt = self.scene()
        swap = {0: 1, 1: 0, 2: 2}

        def relabel(b):
            return BBox(b.cx, b.cy, b.w, b.h, swap[b.class_id])
        dets2 = [Detection(relabel(d.bbox), d.score, d.image_id) for d in dets]
        gt2 = {k: [relabel(b) for b in v] for k, v in gt.items()}
        assert evaluate(dets2, gt2).map == evaluate(dets, gt).map

    def test_no_ground_truth(self):
        with pytest.raises(ValueError):
            evaluate([Detection(box(0.5, 0.5), 0.5, "a")], {"a": []})
