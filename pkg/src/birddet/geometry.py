"""Box geometry: IoU, CIoU and class-aware greedy NMS."""
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Normalized center/extent box."""
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if self.class_id < 0:
            raise ValueError(f"class id must be non-negative, got {self.class_id}")

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, class_id=0):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, class_id)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    image_id: str = ""

    def __post_init__(self):
        if not 0 <= self.score <= 1:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def _xyxy(b):
    return b.corners() if isinstance(b, BBox) else tuple(b)


def iou(a, b):
    """IoU of two boxes given as BBox or (x1, y1, x2, y2) corners."""
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bx1, by1, bx2, by2 = _xyxy(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def _center_penalty(a, b):
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bx1, by1, bx2, by2 = _xyxy(b)
    rho2 = ((ax1 + ax2) - (bx1 + bx2)) ** 2 / 4 + ((ay1 + ay2) - (by1 + by2)) ** 2 / 4
    c2 = (max(ax2, bx2) - min(ax1, bx1)) ** 2 + (max(ay2, by2) - min(ay1, by1)) ** 2
    return rho2 / c2 if c2 > 0 else 0.0


def diou(a, b):
    """IoU minus normalized squared center distance."""
    return iou(a, b) - _center_penalty(a, b)


def ciou_loss(a, b):
    """1 - IoU + rho^2/c^2 + alpha * v (complete-IoU regression loss)."""
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bx1, by1, bx2, by2 = _xyxy(b)
    u = iou(a, b)
    v = 4 / math.pi ** 2 * (math.atan((ax2 - ax1) / (ay2 - ay1)) - math.atan((bx2 - bx1) / (by2 - by1))) ** 2
    denom = (1 - u) + v
    alpha = v / denom if denom > 0 else 0.0
    return 1 - u + _center_penalty(a, b) + alpha * v


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of corner arrays (N, 4) x (M, 4)."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(detections, iou_threshold=0.45, score_threshold=0.25, criterion="iou"):
    """Class-aware greedy suppression.

    Detections below ``score_threshold`` are dropped. The best remaining box
    is kept and same-class boxes whose overlap (``"iou"`` or ``"diou"``)
    exceeds ``iou_threshold`` are removed; repeat. Equal scores keep input
    order. Returns the kept detections in keep order.
    """
    if not (0 <= iou_threshold <= 1 and 0 <= score_threshold <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    if criterion not in ("iou", "diou"):
        raise ValueError(f"unknown suppression criterion {criterion!r}")
    overlap = iou if criterion == "iou" else diou
    order = sorted((i for i, d in enumerate(detections) if d.score >= score_threshold),
                   key=lambda i: -detections[i].score)
    kept = []
    alive = [True] * len(order)
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        kept.append(detections[i])
        top = detections[i].bbox
        for later in range(pos + 1, len(order)):
            other = detections[order[later]].bbox
            if alive[later] and other.class_id == top.class_id and overlap(top, other) > iou_threshold:
                alive[later] = False
    return kept
