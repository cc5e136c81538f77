"""COCO-style average precision with 101-point interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .geometry import Detection, box_area, pairwise_iou, score_order

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass(frozen=True)
class GroundTruth:
    labels: np.ndarray  # [G]
    boxes: np.ndarray  # [G, 4] normalized xyxy


def area_ranges(image_h: int, image_w: int) -> dict[str, tuple[float, float]]:
    """COCO's 32^2 / 96^2 pixel-area cut points rescaled from a 640x640 frame."""
    scale = image_h * image_w / 640.0**2
    small, medium = 32.0**2 * scale, 96.0**2 * scale
    return {"all": (0.0, np.inf), "S": (0.0, small), "M": (small, medium), "L": (medium, np.inf)}


def _greedy_match(ious: list[list[float]], g_ignore: list[bool], thr: float) -> tuple[list[bool], list[bool]]:
    """Reference-evaluator greedy matching of score-sorted detections.

    Each detection takes the highest-IoU free GT at or above ``thr``,
    preferring non-ignored GTs; among equal IoUs the later GT wins.
    Returns per-detection (is_tp, matched_an_ignored_gt).
    """
    ng = len(g_ignore)
    taken = [False] * ng
    order = sorted(range(ng), key=lambda j: g_ignore[j])
    tp, ign = [], []
    for row in ious:
        best, m = min(thr, 1 - 1e-10), -1
        for j in order:
            if taken[j]:
                continue
            if m > -1 and not g_ignore[m] and g_ignore[j]:
                break
            if row[j] < best:
                continue
            best, m = row[j], j
        if m == -1:
            tp.append(False)
            ign.append(False)
        else:
            taken[m] = True
            tp.append(True)
            ign.append(g_ignore[m])
    return tp, ign


@dataclass
class _Cell:
    """Detections and GTs of one (image, class) pair, IoUs precomputed."""

    scores: np.ndarray
    d_area: np.ndarray
    g_area: np.ndarray
    ious: list[list[float]]


def _cells(dets: list[Detection], gt: GroundTruth, num_classes: int, image_h: int, image_w: int) -> list[_Cell]:
    pix = np.array([image_w, image_h, image_w, image_h], dtype=np.float64)
    out = []
    for label in range(num_classes):
        d = [x for x in dets if x.label == label]
        scores = np.array([x.score for x in d], dtype=np.float64)
        order = score_order(scores)[:MAX_DETS]
        d_boxes = np.array([d[i].box for i in order], dtype=np.float64).reshape(-1, 4)
        g_boxes = gt.boxes[gt.labels == label].reshape(-1, 4)
        ious = pairwise_iou(d_boxes, g_boxes) if len(d_boxes) and len(g_boxes) else np.zeros((len(d_boxes), len(g_boxes)))
        out.append(_Cell(scores[order], box_area(d_boxes * pix), box_area(g_boxes * pix), ious.tolist()))
    return out


def precision_at_recalls(scores: np.ndarray, tp: np.ndarray, npos: int) -> np.ndarray:
    """101 interpolated precision values for one (class, IoU) cell."""
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    fp = 1.0 - tp
    tps, fps = np.cumsum(tp), np.cumsum(fp)
    recall = tps / npos
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    # make precision monotonically nonincreasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros(RECALL_POINTS.size)
    valid = idx < precision.size
    out[valid] = precision[idx[valid]]
    return out


def evaluate_ap(detections: list[list[Detection]], gts: list[GroundTruth], num_classes: int,
                score_thr: float = 0.0, image_size: tuple[int, int] = (96, 96)) -> dict[str, float]:
    """AP averaged over IoU 0.50:0.05:0.95 and classes, plus AP50, AP75 and size buckets.

    Cells without any GT are skipped; a metric with no valid cell is -1.
    At most 100 detections per image and class are scored.
    """
    if len(detections) != len(gts):
        raise DimensionError(f"{len(detections)} detection lists for {len(gts)} images")
    h, w = image_size
    cells = [_cells([d for d in ds if d.score >= score_thr], gt, num_classes, h, w)
             for ds, gt in zip(detections, gts)]
    table = {}  # (range, thr) -> per-class AP values
    for rname, (lo, hi) in area_ranges(h, w).items():
        for thr in IOU_THRESHOLDS:
            values = []
            for label in range(num_classes):
                all_scores, all_tp, total = [], [], 0
                for per_image in cells:
                    cell = per_image[label]
                    g_ignore = ((cell.g_area < lo) | (cell.g_area > hi)).tolist()
                    total += g_ignore.count(False)
                    if not len(cell.scores):
                        continue
                    tp, ign = _greedy_match(cell.ious, g_ignore, float(thr))
                    tp = np.array(tp, dtype=bool)
                    ign = np.array(ign, dtype=bool) | (~tp & ((cell.d_area < lo) | (cell.d_area > hi)))
                    all_scores.append(cell.scores[~ign])
                    all_tp.append(tp[~ign])
                if total == 0:
                    continue
                scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
                tps = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
                values.append(precision_at_recalls(scores, tps, total).mean())
            table[(rname, float(thr))] = values

    def summarize(rname: str, thr: float | None = None) -> float:
        keys = [(rname, float(t)) for t in IOU_THRESHOLDS] if thr is None else [(rname, thr)]
        vals = [v for k in keys for v in table[k]]
        return float(np.mean(vals)) if vals else -1.0

    return {
        "AP": summarize("all"),
        "AP50": summarize("all", 0.5),
        "AP75": summarize("all", 0.75),
        "AP_S": summarize("S"),
        "AP_M": summarize("M"),
        "AP_L": summarize("L"),
    }


def ground_truths(scenes) -> list[GroundTruth]:
    return [GroundTruth(s.labels, s.boxes) for s in scenes]
