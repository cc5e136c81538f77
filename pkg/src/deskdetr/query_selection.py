"""Encoder-side prediction head and top-K query initialization.

The head scores every encoder token and regresses a box relative to a grid
anchor. The K best tokens seed the decoder: their features become content
queries and their boxes become position queries. How the head is trained
decides what "best" means: with the uncertainty-minimal scheme the class
score is pushed toward the box IoU, so confident tokens also localize well.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import LayerNorm, Linear, MLP, Module, Tensor
from .autodiff import functional as F
from .errors import ConfigError, StorageError
from .geometry import cxcywh_to_xyxy, pairwise_iou

SCHEMES = ("vanilla", "uncertainty")


def make_anchors(shapes: list[tuple[int, int]], grid_size: float = 0.05, eps: float = 0.01) -> np.ndarray:
    """Inverse-sigmoid cxcywh anchors [T, 4], one per token, levels concatenated.

    Level ``l`` anchors sit at cell centers with side ``grid_size * 2**l``.
    """
    out = []
    for lvl, (h, w) in enumerate(shapes):
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (gx.reshape(-1) + 0.5) / w
        cy = (gy.reshape(-1) + 0.5) / h
        side = np.full(h * w, grid_size * 2.0**lvl)
        out.append(np.stack([cx, cy, side, side], axis=-1))
    anchors = np.clip(np.concatenate(out), eps, 1 - eps)
    return np.log(anchors / (1 - anchors))


def token_count(height: int, width: int, strides=(8, 16, 32)) -> int:
    return sum((height // s) * (width // s) for s in strides)


def uncertainty(localization: np.ndarray | float, classification: np.ndarray | float):
    """Discrepancy |P - C| between localization quality and class confidence."""
    return np.abs(np.asarray(localization, dtype=np.float64) - np.asarray(classification, dtype=np.float64))


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores along the last axis, descending.

    Ties go to the lower index. Works on [T] or batched [N, T] scores.
    """
    scores = np.asarray(scores)
    t = scores.shape[-1]
    if not 1 <= k <= t:
        raise ConfigError(f"cannot select {k} queries from {t} tokens")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


class EncoderHead(Module):
    """Per-token class logits and anchor-relative boxes."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.score_head = Linear(dim, num_classes, rng)
        self.bbox_head = MLP([dim, dim, dim, 4], rng)
        self.score_head.bias.data[...] = -np.log((1 - 0.01) / 0.01)
        self.bbox_head.layers[-1].weight.data[...] = 0.0
        self.bbox_head.layers[-1].bias.data[...] = 0.0

    def features(self, memory: Tensor) -> Tensor:
        return self.norm(self.proj(memory))

    def forward(self, memory: Tensor, anchors: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """(features [N, T, D], logits [N, T, C], box logits [N, T, 4]) for every token."""
        feats = self.features(memory)
        return feats, self.score_head(feats), self.bbox_head(feats) + anchors.astype(feats.dtype)


def head_flops(dim: int, num_classes: int, tokens: int, k: int) -> int:
    """Projection and scoring over every token, box regression over the ``k`` selected ones."""
    return 2 * tokens * dim * (dim + num_classes) + 2 * k * dim * (2 * dim + 4)


@dataclass
class SelectedQueries:
    indices: np.ndarray  # [N, K] token ids by descending score
    scores: np.ndarray  # [N, K] max-class sigmoid score
    content: Tensor  # [N, K, D] detached features
    box_logits: Tensor  # [N, K, 4] inverse-sigmoid cxcywh, differentiable
    logits: Tensor  # [N, K, C] class logits of the selected tokens

    @property
    def boxes(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.box_logits.data))


def select_queries(head: EncoderHead, memory: Tensor, anchors: np.ndarray, k: int) -> SelectedQueries:
    """Score all tokens, keep the top ``k`` and regress boxes only for those."""
    feats = head.features(memory)
    logits = head.score_head(feats)
    score = logits.data.max(axis=-1)  # sigmoid is monotone, so rank on logits
    idx = select_topk(score, k)
    sel_feats = F.gather_rows(feats, idx)
    box_logits = head.bbox_head(sel_feats) + anchors[idx].astype(feats.dtype)
    sel_logits = F.gather_rows(logits, idx)
    probs = 1.0 / (1.0 + np.exp(-np.take_along_axis(score, idx, axis=-1).astype(np.float64)))
    return SelectedQueries(idx, probs, sel_feats.detach(), box_logits, sel_logits)


# -- selection quality -------------------------------------------------------

@dataclass
class SelectionStats:
    """Per selected feature: best class score and IoU against the best GT."""

    cls_scores: np.ndarray
    ious: np.ndarray

    @classmethod
    def empty(cls) -> "SelectionStats":
        return cls(np.zeros(0), np.zeros(0))

    def extend(self, cls_scores: np.ndarray, ious: np.ndarray) -> None:
        self.cls_scores = np.concatenate([self.cls_scores, np.asarray(cls_scores, dtype=np.float64)])
        self.ious = np.concatenate([self.ious, np.asarray(ious, dtype=np.float64)])


def best_gt_iou(boxes_cxcywh: np.ndarray, gt_boxes_cxcywh: np.ndarray) -> np.ndarray:
    if len(gt_boxes_cxcywh) == 0:
        return np.zeros(len(boxes_cxcywh))
    return pairwise_iou(cxcywh_to_xyxy(boxes_cxcywh), cxcywh_to_xyxy(gt_boxes_cxcywh)).max(axis=1)


def prop_metrics(cls_scores: np.ndarray, ious: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """(Prop_cls, Prop_both): share with score > thr, and with score and IoU > thr."""
    cls_scores = np.asarray(cls_scores)
    ious = np.asarray(ious)
    if cls_scores.size == 0:
        return 0.0, 0.0
    confident = cls_scores > threshold
    return float(confident.mean()), float((confident & (ious > threshold)).mean())


def export_scatter(rows: dict[str, SelectionStats], path: str | os.PathLike, threshold: float = 0.5) -> int:
    """Write ``cls_score,iou_score,scheme`` rows for features scoring above ``threshold``."""
    unknown = set(rows) - set(SCHEMES)
    if unknown:
        raise ConfigError(f"unknown schemes {sorted(unknown)}")
    written = 0
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cls_score", "iou_score", "scheme"])
            for scheme, stats in rows.items():
                keep = stats.cls_scores > threshold
                for c, i in zip(stats.cls_scores[keep], stats.ious[keep]):
                    writer.writerow([f"{c:.6f}", f"{i:.6f}", scheme])
                    written += 1
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return written
