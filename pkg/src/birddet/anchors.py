"""Anchor mining with k-means++ seeding and Lloyd refinement.

Boxes are origin-aligned (w, h) pairs. Two metrics are supported:

``iou``        d = 1 - IoU, inertia = mean d, centers recentered by per-cluster median
``euclidean``  d = ||a - b||, inertia = mean d**2, centers recentered by mean
"""
from dataclasses import dataclass, field

import numpy as np

from .kernels import wh_iou_matrix
from .rng import make_rng

METRICS = ("iou", "euclidean")


@dataclass
class AnchorSet:
    anchors: np.ndarray          # (k, 2) sorted by area
    metric: str
    seed: object
    inertia: float
    history: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.anchors)


def _wh(boxes):
    if len(boxes) and hasattr(boxes[0], "w"):
        arr = np.array([[b.w, b.h] for b in boxes], dtype=np.float64)
    else:
        arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if arr.size and not np.all((arr > 0) & (arr <= 1)):
        raise ValueError("box extents must lie in (0, 1]")
    return arr


def _check_metric(metric):
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def distance_matrix(points, centers, metric="iou"):
    _check_metric(metric)
    if metric == "iou":
        return 1.0 - wh_iou_matrix(points, centers)
    diff = points[:, None, :] - centers[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def box_distance(a, b, metric="iou"):
    return float(distance_matrix(_wh([a]), _wh([b]), metric)[0, 0])


def _cost(dist, metric):
    return dist if metric == "iou" else dist ** 2


def kmeanspp_seed(boxes, k, metric="iou", rng=0):
    """k initial centers: the first uniform, each next drawn with p ~ D(x)^2."""
    pts = _wh(boxes)
    if len(pts) == 0:
        raise ValueError("cannot seed from an empty box set")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = make_rng(rng)
    chosen = [int(rng.integers(len(pts)))]
    d = distance_matrix(pts, pts[chosen], metric)[:, 0]
    for _ in range(1, k):
        w = d ** 2
        total = w.sum()
        if total > 0:
            idx = int(rng.choice(len(pts), p=w / total))
        else:
            idx = int(rng.integers(len(pts)))
        chosen.append(idx)
        d = np.minimum(d, distance_matrix(pts, pts[idx:idx + 1], metric)[:, 0])
    return pts[chosen].copy()


def random_seed(boxes, k, rng=0):
    """k boxes drawn uniformly without replacement (plain k-means initialization)."""
    pts = _wh(boxes)
    rng = make_rng(rng)
    idx = rng.choice(len(pts), size=k, replace=k > len(pts))
    return pts[idx].copy()


def _assign(pts, centers, metric):
    cost = _cost(distance_matrix(pts, centers, metric), metric)
    labels = np.argmin(cost, axis=1)
    return labels, cost[np.arange(len(pts)), labels]


def _recenter(members, metric):
    return members.mean(axis=0) if metric == "euclidean" else np.median(members, axis=0)


def kmeans_run(boxes, centers, metric="iou", max_iters=300, tol=1e-6, seed=None):
    """Lloyd iterations from ``centers``.

    A recentered cluster keeps its old center if the new one would cost more,
    and an empty cluster is moved onto the point farthest from its center, so
    the recorded inertia never increases. Stops when assignments are stable,
    the largest center move is below ``tol``, or after ``max_iters``.
    """
    _check_metric(metric)
    pts = _wh(boxes)
    centers = np.array(centers, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0 or len(centers) == 0:
        raise ValueError("need at least one box and one center")
    labels, costs = _assign(pts, centers, metric)
    history = [float(costs.mean())]
    for _ in range(max_iters):
        new = centers.copy()
        taken = set()
        for j in range(len(centers)):
            mask = labels == j
            if not mask.any():
                order = np.argsort(-costs, kind="stable")
                far = next((int(i) for i in order if int(i) not in taken), int(order[0]))
                taken.add(far)
                new[j] = pts[far]
                continue
            members = pts[mask]
            cand = _recenter(members, metric)
            old_cost = _cost(distance_matrix(members, centers[j:j + 1], metric), metric).sum()
            new_cost = _cost(distance_matrix(members, cand[None], metric), metric).sum()
            if new_cost <= old_cost:
                new[j] = cand
        new_labels, new_costs = _assign(pts, new, metric)
        inertia = float(new_costs.mean())
        if inertia > history[-1]:
            break  # roundoff only; keep the previous state
        move = float(np.abs(new - centers).max())
        stable = np.array_equal(new_labels, labels)
        centers, labels, costs = new, new_labels, new_costs
        history.append(inertia)
        if stable or move < tol:
            break
    order = np.lexsort((centers[:, 0], centers[:, 0] * centers[:, 1]))
    return AnchorSet(centers[order], metric, seed, history[-1], history)


def mine_anchors(boxes, k=9, metric="iou", seed=0, max_iters=300, tol=1e-6, init="kmeans++"):
    rng = make_rng(seed)
    if init == "kmeans++":
        start = kmeanspp_seed(boxes, k, metric, rng)
    elif init == "random":
        start = random_seed(boxes, k, rng)
    else:
        raise ValueError(f"unknown init {init!r}")
    return kmeans_run(boxes, start, metric, max_iters, tol, seed=seed)


def inertia_of(boxes, centers, metric="iou"):
    return float(_assign(_wh(boxes), np.asarray(centers, dtype=np.float64).reshape(-1, 2), metric)[1].mean())


def mean_best_iou(boxes, anchors):
    pts = _wh(boxes)
    if len(pts) == 0:
        raise ValueError("no boxes to score")
    a = anchors.anchors if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    return float(wh_iou_matrix(pts, a).max(axis=1).mean())


def write_anchors(path, aset, extra=None):
    lines = ["# anchor boxes (normalized w h), sorted by area",
             f"metric {aset.metric}", f"seed {aset.seed}", f"k {aset.k}",
             f"inertia {aset.inertia:.17g}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} {value}")
    lines.append("anchors")
    lines += [f"{w:.17g} {h:.17g}" for w, h in aset.anchors]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_anchors(path):
    fields, pairs, in_list = {}, [], False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if in_list:
                w, h = line.split()
                pairs.append((float(w), float(h)))
            elif line == "anchors":
                in_list = True
            else:
                key, value = line.split(None, 1)
                fields[key] = value
    seed = fields.get("seed")
    seed = int(seed) if seed not in (None, "None") else None
    return AnchorSet(np.array(pairs).reshape(-1, 2), fields["metric"], seed, float(fields["inertia"]))
