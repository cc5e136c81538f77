"""Box algebra, overlap measures and class-wise greedy NMS.

Boxes are normalized image coordinates. ``xyxy`` boxes are
(x1, y1, x2, y2) with x1 <= x2, y1 <= y2; ``cxcywh`` boxes are
(cx, cy, w, h) with w, h >= 0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    label: int
    score: float

    def to_line(self) -> str:
        x1, y1, x2, y2 = self.box
        return f"{self.label} {self.score:.17g} {x1:.17g} {y1:.17g} {x2:.17g} {y2:.17g}"

    @classmethod
    def from_line(cls, line: str) -> "Detection":
        parts = line.split()
        if len(parts) != 6:
            raise ConfigError(f"detection line needs 6 fields, got {len(parts)}: {line!r}")
        label = int(parts[0])
        score, x1, y1, x2, y2 = (float(p) for p in parts[1:])
        if not np.isfinite(score):
            raise ConfigError(f"non-finite score in {line!r}")
        return cls((x1, y1, x2, y2), label, score)


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1], axis=-1)


def box_area(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes)
    return np.maximum(b[..., 2] - b[..., 0], 0.0) * np.maximum(b[..., 3] - b[..., 1], 0.0)


def _inter_union(a: np.ndarray, b: np.ndarray):
    iw = np.maximum(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0)
    ih = np.maximum(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter, union


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two xyxy boxes; 0 when the union is empty."""
    inter, union = _inter_union(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(_safe_ratio(inter, union))


def giou(a: Sequence[float], b: Sequence[float]) -> float:
    """Generalized IoU; a zero-area enclosure falls back to plain IoU."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(pairwise_giou(a[None], b[None])[0, 0])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[N, 4] x [M, 4] -> [N, M] IoU matrix."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    inter, union = _inter_union(a, b)
    return _safe_ratio(inter, union)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two [N, 4] box arrays."""
    inter, union = _inter_union(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return _safe_ratio(inter, union)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    inter, union = _inter_union(a, b)
    ious = _safe_ratio(inter, union)
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclosure = np.maximum(ew, 0.0) * np.maximum(eh, 0.0)
    penalty = _safe_ratio(enclosure - union, enclosure)
    return np.where(enclosure > 0, ious - penalty, ious)


def count_remaining(scores: np.ndarray | Iterable[Detection], conf_thr: float) -> int:
    """Number of detections whose score is at least ``conf_thr``."""
    if not isinstance(scores, np.ndarray):
        scores = np.array([d.score for d in scores], dtype=np.float64)
    return int(np.count_nonzero(scores >= conf_thr))


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties go to the lower original index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.size), -scores))


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, conf_thr: float, iou_thr: float) -> np.ndarray:
    """Class-wise greedy NMS; returns kept indices in descending-score order."""
    if not (0.0 <= conf_thr <= 1.0 and 0.0 <= iou_thr <= 1.0):
        raise ConfigError(f"NMS thresholds must lie in [0, 1], got conf={conf_thr}, iou={iou_thr}")
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = score_order(scores)
    order = order[scores[order] >= conf_thr]
    if order.size == 0:
        return order
    areas = box_area(boxes)
    kept: list[np.ndarray] = []
    for label in np.unique(labels[order]):
        rest = order[labels[order] == label]
        keep_cls = []
        while rest.size:
            i = rest[0]
            keep_cls.append(i)
            rest = rest[1:]
            if not rest.size:
                break
            bi, br = boxes[i], boxes[rest]
            iw = np.maximum(np.minimum(bi[2], br[:, 2]) - np.maximum(bi[0], br[:, 0]), 0.0)
            ih = np.maximum(np.minimum(bi[3], br[:, 3]) - np.maximum(bi[1], br[:, 1]), 0.0)
            inter = iw * ih
            union = areas[i] + areas[rest] - inter
            ious = _safe_ratio(inter, union)
            rest = rest[ious <= iou_thr]
        kept.append(np.asarray(keep_cls, dtype=np.int64))
    merged = np.concatenate(kept)
    rank = np.empty(scores.size, dtype=np.int64)
    rank[order] = np.arange(order.size)
    return merged[np.argsort(rank[merged], kind="stable")]


def nms(dets: Sequence[Detection], conf_thr: float, iou_thr: float) -> list[int]:
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    labels = np.array([d.label for d in dets], dtype=np.int64)
    return [int(i) for i in nms_arrays(boxes, scores, labels, conf_thr, iou_thr)]


def score_filter(scores: np.ndarray, score_thr: float) -> np.ndarray:
    """NMS-free post-processing: indices of scores >= threshold, by descending score."""
    scores = np.asarray(scores)
    keep = np.flatnonzero(scores >= score_thr)
    return keep[score_order(scores[keep])]


def write_detections(path: str | os.PathLike, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(d.to_line() + "\n")


def read_detections(path: str | os.PathLike) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(Detection.from_line(line))
    return out


def detections_to_arrays(dets: Sequence[Detection]):
    boxes = np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    labels = np.array([d.label for d in dets], dtype=np.int64)
    return boxes, scores, labels
