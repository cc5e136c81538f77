"""Brute-force reference implementations shared by the unit and acceptance tests."""

import itertools

import numpy as np

from deskdetr.evaluation import RECALL_POINTS, GroundTruth
from deskdetr.geometry import Detection, iou


def gt(boxes, labels):
    return GroundTruth(np.asarray(labels, dtype=np.int64), np.asarray(boxes, dtype=np.float64).reshape(-1, 4))


def brute_force(cost):
    """Lexicographically smallest optimal matching by exhaustive search."""
    n, m = cost.shape
    best, best_pairs = np.inf, None
    if n <= m:
        candidates = ([(i, c) for i, c in enumerate(cols)] for cols in itertools.permutations(range(m), n))
    else:
        candidates = (sorted((r, j) for j, r in enumerate(rows)) for rows in itertools.permutations(range(n), m))
    for pairs in candidates:
        total = sum(cost[i, j] for i, j in pairs)
        if total < best - 1e-9 or (abs(total - best) <= 1e-9 and pairs < best_pairs):
            best, best_pairs = total, pairs
    return best_pairs


def random_boxes(rng, n):
    xy = rng.uniform(0, 0.8, size=(n, 2))
    wh = rng.uniform(0.02, 0.3, size=(n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, 1.0)], axis=1)


def reference_nms(dets, conf_thr, iou_thr):
    """Textbook greedy NMS over Detection objects, one class at a time."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    order = [i for i in order if dets[i].score >= conf_thr]
    keep = []
    for i in order:
        if all(dets[k].label != dets[i].label or iou(dets[k].box, dets[i].box) <= iou_thr for k in keep):
            keep.append(i)
    return keep


def oracle_ap(dets, gts, label, thr):
    """AP of one class at one IoU threshold, recomputing the matching for every score prefix."""
    flat = [(d.score, i, k, d) for i, ds in enumerate(dets) for k, d in enumerate(ds) if d.label == label]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    npos = sum(int(np.sum(g.labels == label)) for g in gts)
    if npos == 0:
        return None
    points = []
    for n in range(1, len(flat) + 1):
        tp = 0
        for img, g in enumerate(gts):
            boxes = [b for b, l in zip(g.boxes, g.labels) if l == label]
            taken = [False] * len(boxes)
            for _, i, _, d in flat[:n]:
                if i != img:
                    continue
                best, m = thr, -1
                for j, b in enumerate(boxes):
                    v = iou(d.box, b)
                    if not taken[j] and v >= best:
                        best, m = v, j
                if m >= 0:
                    taken[m] = True
                    tp += 1
        points.append((tp / npos, tp / n))
    return float(np.mean([max([p for r, p in points if r >= rp - 1e-12], default=0.0) for rp in RECALL_POINTS]))


def random_case(rng, n_img=2, max_boxes=5):
    dets, gts = [], []
    for _ in range(n_img):
        ng = int(rng.integers(1, max_boxes + 1))
        xy = rng.uniform(0, 0.6, size=(ng, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(0.15, 0.35, size=(ng, 2))], axis=1)
        labels = rng.integers(0, 2, ng)
        gts.append(gt(boxes, labels))
        ds = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            j = int(rng.integers(ng))
            box = np.clip(boxes[j] + rng.normal(0, 0.04, 4), 0, 1)
            lab = int(labels[j]) if rng.uniform() < 0.8 else int(rng.integers(0, 2))
            ds.append(Detection(tuple(box), lab, float(rng.uniform())))
        dets.append(ds)
    return dets, gts
