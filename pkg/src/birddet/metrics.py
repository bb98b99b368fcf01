"""Detection evaluation: greedy matching, precision/recall, AP and mAP."""
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import iou


@dataclass
class MatchRecord:
    index: int          # position in the input detection list
    image_id: str
    class_id: int
    score: float
    tp: bool
    gt: object = None   # (image_id, gt index) when matched


@dataclass
class MatchResult:
    records: list                     # in processing (score-descending) order
    gt_per_class: dict                # class -> number of ground truths
    unmatched_per_image: dict         # image -> unmatched ground-truth count
    iou_threshold: float = 0.5

    def counts(self, class_id=None):
        recs = [r for r in self.records if class_id is None or r.class_id == class_id]
        tp = sum(r.tp for r in recs)
        n_gt = sum(self.gt_per_class.values()) if class_id is None else self.gt_per_class.get(class_id, 0)
        return tp, len(recs) - tp, n_gt - tp


def match_detections(detections, ground_truth, iou_threshold=0.5):
    """Greedy one-to-one matching in descending score order (ties: input order).

    ``detections`` is a list of :class:`~birddet.geometry.Detection`;
    ``ground_truth`` maps image id to a list of boxes.
    """
    for d in detections:
        if d.image_id not in ground_truth:
            raise KeyError(f"detection references unknown image_id {d.image_id!r}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    used = {img: [False] * len(boxes) for img, boxes in ground_truth.items()}
    records = []
    for i in order:
        d = detections[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(ground_truth[d.image_id]):
            if used[d.image_id][j] or g.class_id != d.bbox.class_id:
                continue
            v = iou(d.bbox, g)
            if v > best_iou:
                best, best_iou = j, v
        tp = best is not None and best_iou >= iou_threshold
        if tp:
            used[d.image_id][best] = True
        records.append(MatchRecord(i, d.image_id, d.bbox.class_id, d.score, tp,
                                   (d.image_id, best) if tp else None))
    gt_per_class = {}
    for boxes in ground_truth.values():
        for g in boxes:
            gt_per_class[g.class_id] = gt_per_class.get(g.class_id, 0) + 1
    unmatched = {img: flags.count(False) for img, flags in used.items()}
    return MatchResult(records, gt_per_class, unmatched, iou_threshold)


def precision_recall(tp, fp, fn):
    """P = TP/(TP+FP), R = TP/(TP+FN); an empty denominator gives 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def average_precision(tp_flags, scores, n_gt):
    """Area under the monotone precision envelope (all-point interpolation).

    Returns None when the class has no ground truth.
    """
    if n_gt == 0:
        return None
    tp_flags = np.asarray(tp_flags, dtype=bool)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def mean_ap(aps):
    aps = [a for a in aps if a is not None]
    if not aps:
        raise ValueError("no class with ground truth to average")
    return float(sum(aps) / len(aps))


@dataclass
class ClassResult:
    precision: float
    recall: float
    ap: object          # None when the class has no ground truth
    n_gt: int
    n_det: int
    tp: int
    fp: int


@dataclass
class EvalReport:
    classes: dict
    map: float
    iou_threshold: float
    flagged: list = field(default_factory=list)

    @property
    def num_classes(self):
        return sum(1 for c in self.classes.values() if c.ap is not None)

    def to_dict(self):
        return {
            "iou_threshold": self.iou_threshold,
            "num_classes": self.num_classes,
            "map": self.map,
            "classes": {str(k): vars(v) for k, v in sorted(self.classes.items())},
            "flagged": self.flagged,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self, label="model"):
        lines = [f"{'class':>8} {'P':>8} {'R':>8} {'AP':>8} {'GT':>6} {'Det':>6}"]
        for k, c in sorted(self.classes.items()):
            ap = f"{c.ap:8.4f}" if c.ap is not None else f"{'n/a':>8}"
            lines.append(f"{k:>8} {c.precision:8.4f} {c.recall:8.4f} {ap} {c.n_gt:6d} {c.n_det:6d}")
        lines += ["", f"{'Model':<16} {'mAP':>8}", f"{label:<16} {self.map:8.4f}"]
        return "\n".join(lines)


def evaluate(detections, ground_truth, iou_threshold=0.5):
    match = match_detections(detections, ground_truth, iou_threshold)
    classes = sorted(set(match.gt_per_class) | {r.class_id for r in match.records})
    results, flagged = {}, []
    for c in classes:
        recs = [r for r in match.records if r.class_id == c]
        tp, fp, fn = match.counts(c)
        p, r = precision_recall(tp, fp, fn)
        n_gt = match.gt_per_class.get(c, 0)
        ap = average_precision([x.tp for x in recs], [x.score for x in recs], n_gt)
        if ap is None:
            flagged.append(f"class {c}: detections but no ground truth; excluded from mAP")
        results[c] = ClassResult(p, r, ap, n_gt, len(recs), tp, fp)
    if not any(v.ap is not None for v in results.values()):
        raise ValueError("no class with ground truth to evaluate")
    return EvalReport(results, mean_ap([v.ap for v in results.values()]), iou_threshold, flagged)
