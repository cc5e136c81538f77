"""Training losses: matched set losses per decoder layer, encoder head and denoising."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .decoder import DenoisingBatch, LayerOutput
from .errors import ConfigError
from .geometry import cxcywh_to_xyxy, paired_iou
from .matching import CostWeights, cost_matrix, hungarian
from .query_selection import SCHEMES


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    bbox: float = 5.0
    giou: float = 2.0
    alpha: float = 0.75  # IoU-aware classification loss
    gamma: float = 2.0
    focal_alpha: float = 0.25  # plain focal loss used by the vanilla scheme
    dn: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.bbox, self.giou, self.dn) < 0:
            raise ConfigError("loss weights must be nonnegative")


# -- elementwise pieces ------------------------------------------------------

def _binary_entropy(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    out = np.zeros_like(t)
    inner = (t > 0) & (t < 1)
    ti = t[inner]
    out[inner] = -(ti * np.log(ti) + (1 - ti) * np.log(1 - ti))
    return out


def iou_aware_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.75, gamma: float = 2.0) -> Tensor:
    """Summed IoU-aware focal loss; ``target`` holds the IoU at positives and 0 elsewhere.

    Each entry is ``(alpha * p**gamma * (1 - t) + t) * KL(t || p)``: the
    cross-entropy minus the target entropy, so the loss is exactly zero when
    every score equals its target.
    """
    t = np.asarray(target, dtype=logits.dtype)
    p = F.sigmoid(logits)
    weight = (p ** gamma) * (alpha * (1.0 - t)) + t
    kl = F.bce_with_logits(logits, t) - _binary_entropy(t).astype(logits.dtype)
    return (weight * kl).sum()


def focal_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed sigmoid focal loss against binary targets."""
    t = np.asarray(target, dtype=logits.dtype)
    p = F.sigmoid(logits)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = (alpha * t + (1 - alpha) * (1 - t)).astype(logits.dtype)
    return (F.bce_with_logits(logits, t) * ((1.0 - p_t) ** gamma) * alpha_t).sum()


def giou_loss(pred_cxcywh: Tensor, target_cxcywh: np.ndarray) -> Tensor:
    """Summed ``1 - GIoU`` between matched predicted and target boxes, [M, 4] each."""
    tgt = cxcywh_to_xyxy(np.asarray(target_cxcywh, dtype=pred_cxcywh.dtype))
    cx, cy, w, h = (pred_cxcywh[:, i] for i in range(4))
    x1, y1, x2, y2 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    tx1, ty1, tx2, ty2 = (tgt[:, i] for i in range(4))
    iw = F.clamp(F.minimum(x2, tx2) - F.maximum(x1, tx1), 0.0, None)
    ih = F.clamp(F.minimum(y2, ty2) - F.maximum(y1, ty1), 0.0, None)
    inter = iw * ih
    area_p = F.clamp(x2 - x1, 0.0, None) * F.clamp(y2 - y1, 0.0, None)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    union = area_p + area_t - inter
    ew = F.maximum(x2, tx2) - F.minimum(x1, tx1)
    eh = F.maximum(y2, ty2) - F.minimum(y1, ty1)
    enclosure = ew * eh
    eps = 1e-7
    g = inter / (union + eps) - (enclosure - union) / (enclosure + eps)
    return (1.0 - g).sum()


# -- set losses --------------------------------------------------------------

@dataclass
class Targets:
    labels: list[np.ndarray]  # per image [G]
    boxes: list[np.ndarray]  # per image [G, 4] cxcywh

    @property
    def num_boxes(self) -> int:
        return int(sum(len(l) for l in self.labels))


Matches = list[tuple[np.ndarray, np.ndarray]]  # per image (pred indices, gt indices)


def match_layer(out: LayerOutput, targets: Targets, cost: CostWeights = CostWeights()) -> Matches:
    logits, boxes = out.logits.data, out.boxes.data
    result = []
    for i, (lab, box) in enumerate(zip(targets.labels, targets.boxes)):
        if len(lab) == 0:
            result.append((np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)))
            continue
        pairs = hungarian(cost_matrix(logits[i], boxes[i], lab, box, cost))
        result.append((np.array([p for p, _ in pairs], dtype=np.int64), np.array([g for _, g in pairs], dtype=np.int64)))
    return result


def set_loss(out: LayerOutput, matches: Matches, targets: Targets, weights: LossWeights, scheme: str,
             normalizer: float) -> dict[str, Tensor]:
    """Weighted class, L1 and GIoU terms of one prediction set."""
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown query-selection scheme {scheme!r}")
    n, q, c = out.logits.shape
    rows, tgt_boxes, tgt_labels = [], [], []
    for i, (pi, gi) in enumerate(matches):
        rows.append(i * q + pi)
        tgt_boxes.append(targets.boxes[i][gi].reshape(-1, 4))
        tgt_labels.append(targets.labels[i][gi])
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    tgt_boxes = np.concatenate(tgt_boxes) if tgt_boxes else np.zeros((0, 4))
    tgt_labels = np.concatenate(tgt_labels) if tgt_labels else np.zeros(0, dtype=np.int64)
    target = np.zeros((n * q, c))
    if rows.size:
        if scheme == "uncertainty":
            # the IoU target is a stop-gradient of the predicted boxes
            pred = out.boxes.detach().data.reshape(-1, 4)[rows]
            target[rows, tgt_labels] = paired_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(tgt_boxes))
        else:
            target[rows, tgt_labels] = 1.0
    flat_logits = out.logits.reshape(n * q, c)
    if scheme == "uncertainty":
        cls = iou_aware_loss(flat_logits, target, weights.alpha, weights.gamma)
    else:
        cls = focal_loss(flat_logits, target, weights.focal_alpha, weights.gamma)
    terms = {"cls": cls * (weights.cls / normalizer)}
    if rows.size:
        pred = F.index(out.boxes.reshape(n * q, 4), rows)
        terms["l1"] = F.abs(pred - tgt_boxes.astype(pred.dtype)).sum() * (weights.bbox / normalizer)
        terms["giou"] = giou_loss(pred, tgt_boxes) * (weights.giou / normalizer)
    return terms


def denoising_matches(dn: DenoisingBatch) -> Matches:
    return [(pi, gi) for pi, gi in zip(dn.positive_index, dn.positive_gt)]


@dataclass
class LossResult:
    total: Tensor
    terms: dict[str, float]  # cls, l1, giou, dn
    parts: dict[str, Tensor] = field(repr=False, default_factory=dict)
    matches: list[Matches] = field(repr=False, default_factory=list)


def detection_loss(layers: list[LayerOutput], encoder: LayerOutput | None, targets: Targets,
                   weights: LossWeights = LossWeights(), scheme: str = "uncertainty",
                   dn_layers: list[LayerOutput] | None = None, dn: DenoisingBatch | None = None,
                   cost: CostWeights = CostWeights()) -> LossResult:
    """Sum of every decoder layer's matched loss, the encoder-head loss and the denoising loss.

    Matching runs independently per layer; denoising queries use their
    known GT correspondence and all other denoising slots count as
    background. Terms are normalized by the number of GT boxes in the batch.
    """
    normalizer = float(max(targets.num_boxes, 1))
    parts: dict[str, Tensor] = {}
    sums = {"cls": [], "l1": [], "giou": [], "dn": []}
    all_matches = []
    sets = list(enumerate(layers))
    if encoder is not None:
        sets.append(("enc", encoder))
    for key, out in sets:
        matches = match_layer(out, targets, cost)
        all_matches.append(matches)
        for name, t in set_loss(out, matches, targets, weights, scheme, normalizer).items():
            parts[f"{name}_{key}"] = t
            sums[name].append(t)
    if dn is not None and dn_layers:
        dn_matches = denoising_matches(dn)
        dn_norm = normalizer * dn.groups
        for i, out in enumerate(dn_layers):
            for name, t in set_loss(out, dn_matches, targets, weights, scheme, dn_norm).items():
                t = t * weights.dn
                parts[f"dn_{name}_{i}"] = t
                sums["dn"].append(t)
    pieces = [t for v in sums.values() for t in v]
    total = pieces[0]
    for t in pieces[1:]:
        total = total + t
    terms = {k: float(sum(float(t.data) for t in v)) for k, v in sums.items()}
    return LossResult(total, terms, parts, all_matches)
