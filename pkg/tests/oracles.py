"""Brute-force reference implementations shared by unit and acceptance tests.

Each oracle follows the definition directly and shares no code with the
package beyond the plain ``iou`` overlap it is checking against.
"""
import itertools
from fractions import Fraction

import numpy as np

from birddet.geometry import iou


def ap_oracle(tp_flags, scores, n_gt):
    """Every score threshold gives one P-R point; integrate max{P : R >= r} dr exactly."""
    points = []
    for t in sorted(set(scores)):
        sel = [bool(tp) for tp, s in zip(tp_flags, scores) if s >= t]
        tp = sum(sel)
        points.append((Fraction(tp, n_gt), Fraction(tp, len(sel))))
    levels = sorted({r for r, _ in points} | {Fraction(0)})
    area = Fraction(0)
    for lo, hi in zip(levels, levels[1:]):
        area += (hi - lo) * max(p for r, p in points if r >= hi)
    return float(area)


def nms_oracle(dets, iou_thr, score_thr):
    """The greedy output is the unique subset S of candidates with:
    i in S  <=>  no higher-ranked j in S of the same class overlaps i above the threshold.
    Found by enumerating every subset."""
    cand = sorted((i for i, d in enumerate(dets) if d.score >= score_thr), key=lambda i: (-dets[i].score, i))
    rank = {i: r for r, i in enumerate(cand)}
    solutions = []
    for bits in itertools.product([False, True], repeat=len(cand)):
        s = {i for i, keep in zip(cand, bits) if keep}
        ok = all((i in s) == (not any(rank[j] < rank[i] and dets[j].bbox.class_id == dets[i].bbox.class_id
                                      and iou(dets[j].bbox, dets[i].bbox) > iou_thr for j in s))
                 for i in cand)
        if ok:
            solutions.append(s)
    assert len(solutions) == 1
    return [dets[i] for i in cand if i in solutions[0]]


def best_partition_sse(pts):
    """Exhaustive search over all 2-partitions; cost is mean squared distance to cluster means."""
    n = len(pts)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)
        if lab.all() or not lab.any():
            continue
        sse = sum(((pts[lab == j] - pts[lab == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
        best = min(best, sse / n)
    return best
