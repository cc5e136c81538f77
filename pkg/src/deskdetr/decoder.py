"""Deformable-attention decoder with iterative box refinement and denoising groups."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import LayerNorm, Linear, MLP, Module, MultiheadAttention, Tensor
from .autodiff import functional as F
from .errors import ConfigError
from .geometry import cxcywh_to_xyxy, xyxy_to_cxcywh


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 6
    num_queries: int = 300
    npoints: int = 4
    nheads: int = 8
    num_levels: int = 3
    embed_dim: int = 256
    ffn_dim: int = 1024
    num_classes: int = 80
    dn_number: int = 200
    label_noise_ratio: float = 0.5
    box_noise_scale: float = 1.0

    def __post_init__(self):
        if self.num_layers < 1 or self.num_queries < 1 or self.npoints < 1 or self.num_levels < 1:
            raise ConfigError("decoder layers, queries, points and levels must be positive")
        if self.embed_dim % self.nheads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by nheads {self.nheads}")
        if not 0.0 <= self.label_noise_ratio <= 1.0 or self.box_noise_scale < 0 or self.dn_number < 0:
            raise ConfigError("invalid denoising noise settings")


class DeformableAttention(Module):
    """Multi-scale deformable cross-attention.

    Every (query, head, level) predicts ``npoints`` offsets plus softmax
    weights shared across levels and points. Points sit at the reference box
    center shifted by ``offset / npoints * box_wh / 2`` and are read from the
    value maps by bilinear sampling.
    """

    def __init__(self, dim: int, nheads: int, num_levels: int, npoints: int, rng: np.random.Generator):
        super().__init__()
        self.dim, self.nheads, self.num_levels, self.npoints = dim, nheads, num_levels, npoints
        n_off = nheads * num_levels * npoints
        self.sampling_offsets = Linear(dim, n_off * 2, rng)
        self.attention_weights = Linear(dim, n_off, rng)
        self.value_proj = Linear(dim, dim, rng)
        self.output_proj = Linear(dim, dim, rng)
        # offsets start on a ring of directions, one per head, growing with the point index
        self.sampling_offsets.weight.data[...] = 0.0
        theta = np.arange(nheads) * (2.0 * math.pi / nheads)
        grid = np.stack([np.cos(theta), np.sin(theta)], -1)
        grid = grid / np.abs(grid).max(-1, keepdims=True)
        grid = np.tile(grid[:, None, None, :], (1, num_levels, npoints, 1))
        grid *= np.arange(1, npoints + 1)[None, None, :, None]
        self.sampling_offsets.bias.data[...] = grid.reshape(-1)
        self.attention_weights.weight.data[...] = 0.0
        self.attention_weights.bias.data[...] = 0.0
        self.last_weights: np.ndarray | None = None

    def forward(self, query: Tensor, ref_boxes: Tensor, value: Tensor, shapes: list[tuple[int, int]]) -> Tensor:
        """query [N, Q, D], ref_boxes [N, Q, 4] cxcywh in [0, 1], value [N, T, D]."""
        n, q, _ = query.shape
        hd = self.dim // self.nheads
        nh, nl, npt = self.nheads, self.num_levels, self.npoints
        v = self.value_proj(value)
        offsets = self.sampling_offsets(query).reshape(n, q, nh, nl, npt, 2)
        weights = F.softmax(self.attention_weights(query).reshape(n, q, nh, nl * npt), axis=-1)
        self.last_weights = weights.data
        ref = ref_boxes.reshape(n, q, 1, 1, 1, 4)
        center = ref[..., :2]
        scale = ref[..., 2:] * (0.5 / npt)
        locs = center + offsets * scale  # [N, Q, H, L, P, 2]
        sizes = [h * w for h, w in shapes]
        values = F.split(v, sizes, axis=1)
        sampled = []
        for lvl, ((h, w), val) in enumerate(zip(shapes, values)):
            feat = val.reshape(n, h, w, nh, hd).transpose(0, 3, 1, 2, 4).reshape(n * nh, h, w, hd)
            pts = locs[:, :, :, lvl].transpose(0, 2, 1, 3, 4).reshape(n * nh, q * npt, 2)
            sampled.append(F.sample_points(feat, pts).reshape(n * nh, q, npt, hd))
        stacked = F.concat(sampled, axis=2)  # [N*H, Q, L*P, hd]
        w = weights.transpose(0, 2, 1, 3).reshape(n * nh, q, nl * npt, 1)
        out = (stacked * w).sum(axis=2)  # [N*H, Q, hd]
        out = out.reshape(n, nh, q, hd).transpose(0, 2, 1, 3).reshape(n, q, self.dim)
        return self.output_proj(out)


class DecoderLayer(Module):
    """Self-attention, deformable cross-attention and FFN, each post-normalized."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.self_attn = MultiheadAttention(d, cfg.nheads, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = DeformableAttention(d, cfg.nheads, cfg.num_levels, cfg.npoints, rng)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.ffn_dim, rng)
        self.fc2 = Linear(cfg.ffn_dim, d, rng)
        self.norm3 = LayerNorm(d)

    def forward(self, tgt: Tensor, pos: Tensor, ref_boxes: Tensor, memory: Tensor,
                shapes: list[tuple[int, int]], mask: np.ndarray | None = None) -> Tensor:
        q = tgt + pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt, mask=mask))
        tgt = self.norm2(tgt + self.cross_attn(tgt + pos, ref_boxes, memory, shapes))
        return self.norm3(tgt + self.fc2(F.relu(self.fc1(tgt))))


@dataclass
class LayerOutput:
    logits: Tensor  # [N, Q, C]
    boxes: Tensor  # [N, Q, 4] cxcywh


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.query_pos_head = MLP([4, 2 * d, d], rng)
        self.score_heads = [Linear(d, cfg.num_classes, rng) for _ in range(cfg.num_layers)]
        self.bbox_heads = [MLP([d, d, d, 4], rng) for _ in range(cfg.num_layers)]
        prior = -math.log((1 - 0.01) / 0.01)
        for head in self.score_heads:
            head.bias.data[...] = prior
        for head in self.bbox_heads:
            head.layers[-1].weight.data[...] = 0.0
            head.layers[-1].bias.data[...] = 0.0

    def forward(self, tgt: Tensor, ref_logits: Tensor, memory: Tensor, shapes: list[tuple[int, int]],
                mask: np.ndarray | None = None, use_layers: int | None = None) -> list[LayerOutput]:
        """Run the first ``use_layers`` layers; returns one prediction per executed layer.

        ``ref_logits`` are inverse-sigmoid boxes. The refined box of each
        layer is detached before it seeds the next layer.
        """
        use = self.cfg.num_layers if use_layers is None else int(use_layers)
        if not 1 <= use <= self.cfg.num_layers:
            raise ConfigError(f"use_layers must lie in [1, {self.cfg.num_layers}], got {use_layers}")
        ref_logit = ref_logits
        ref_box = F.sigmoid(ref_logit)
        outputs = []
        for i in range(use):
            pos = self.query_pos_head(ref_box)
            tgt = self.layers[i](tgt, pos, ref_box, memory, shapes, mask)
            box_logit = self.bbox_heads[i](tgt) + ref_logit
            boxes = F.sigmoid(box_logit)
            outputs.append(LayerOutput(self.score_heads[i](tgt), boxes))
            ref_box = boxes.detach()
            ref_logit = F.inverse_sigmoid(ref_box)
        return outputs


# -- denoising ---------------------------------------------------------------

@dataclass
class DenoisingBatch:
    """Noised ground-truth queries for N images, laid out group by group.

    Group g occupies ``2 * max_gt`` consecutive slots: ``max_gt`` positives
    then ``max_gt`` negatives. Images with fewer GTs leave padding slots,
    which are supervised as background.
    """

    labels: np.ndarray  # [N, S] noised class ids, num_classes marks padding
    box_logits: np.ndarray  # [N, S, 4] inverse-sigmoid cxcywh
    boxes: np.ndarray  # [N, S, 4] cxcywh after noise
    mask: np.ndarray  # [S + Q, S + Q] True blocks attention
    groups: int
    max_gt: int
    positive_index: list[np.ndarray]  # per image slots of positives, ordered group-major
    positive_gt: list[np.ndarray]  # matching GT index per positive slot

    @property
    def size(self) -> int:
        return self.labels.shape[1]


def denoising_groups(dn_number: int, max_gt: int) -> int:
    """Groups of ``2 * max_gt`` queries needed to reach the denoising number."""
    if max_gt <= 0 or dn_number <= 0:
        return 0
    return max(1, math.ceil(dn_number / (2 * max_gt)))


def make_denoising_batch(gt_labels: list[np.ndarray], gt_boxes: list[np.ndarray], num_queries: int,
                         num_classes: int, dn_number: int = 200, label_noise_ratio: float = 0.5,
                         box_noise_scale: float = 1.0, rng: np.random.Generator | None = None) -> DenoisingBatch | None:
    """Positive/negative denoising groups plus the attention mask; None without GTs.

    Labels flip to a uniformly random class with probability
    ``label_noise_ratio``. Positive boxes move each corner by up to
    ``box_noise_scale * wh / 2``; negatives move by between one and two
    times that, so they overlap their GT less.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    counts = [len(l) for l in gt_labels]
    max_gt = max(counts) if counts else 0
    groups = denoising_groups(dn_number, max_gt)
    if groups == 0:
        return None
    n = len(gt_labels)
    span = 2 * max_gt
    s = span * groups
    labels = np.full((n, s), num_classes, dtype=np.int64)
    boxes = np.zeros((n, s, 4))
    boxes[..., :2] = 0.5
    boxes[..., 2:] = 1e-3
    negative = np.zeros((n, s), dtype=bool)
    pos_index, pos_gt = [], []
    for i, (lab, box) in enumerate(zip(gt_labels, gt_boxes)):
        k = len(lab)
        idx_p, idx_g = [], []
        for g in range(groups):
            start = g * span
            labels[i, start:start + k] = lab
            labels[i, start + max_gt:start + max_gt + k] = lab
            boxes[i, start:start + k] = box
            boxes[i, start + max_gt:start + max_gt + k] = box
            negative[i, start + max_gt:start + max_gt + k] = True
            idx_p.append(np.arange(start, start + k))
            idx_g.append(np.arange(k))
        pos_index.append(np.concatenate(idx_p) if idx_p else np.zeros(0, dtype=np.int64))
        pos_gt.append(np.concatenate(idx_g) if idx_g else np.zeros(0, dtype=np.int64))
    real = labels < num_classes
    if label_noise_ratio > 0:
        flip = (rng.random((n, s)) < label_noise_ratio) & real
        labels = np.where(flip, rng.integers(0, num_classes, size=(n, s)), labels)
    if box_noise_scale > 0:
        xyxy = cxcywh_to_xyxy(boxes)
        diff = np.concatenate([boxes[..., 2:] * 0.5] * 2, axis=-1) * box_noise_scale
        sign = rng.integers(0, 2, size=(n, s, 4)) * 2.0 - 1.0
        part = rng.random((n, s, 4))
        part = np.where(negative[..., None], part + 1.0, part) * sign
        xyxy = np.where(real[..., None], np.clip(xyxy + part * diff, 0.0, 1.0), xyxy)
        boxes = xyxy_to_cxcywh(xyxy)
    eps = 1e-5
    clipped = np.clip(boxes, eps, 1 - eps)
    box_logits = np.log(clipped / (1 - clipped))
    total = s + num_queries
    mask = np.zeros((total, total), dtype=bool)
    mask[s:, :s] = True
    for g in range(groups):
        lo, hi = g * span, (g + 1) * span
        mask[lo:hi, :lo] = True
        mask[lo:hi, hi:s] = True
    return DenoisingBatch(labels, box_logits, boxes, mask, groups, max_gt, pos_index, pos_gt)


def decoder_flops(cfg: DecoderConfig, tokens: int, num_queries: int, use_layers: int) -> int:
    """Multiply-add FLOPs of ``use_layers`` decoder layers plus their heads on one image."""
    d, f, q = cfg.embed_dim, cfg.ffn_dim, num_queries
    n_off = cfg.nheads * cfg.num_levels * cfg.npoints
    pos_head = 2 * q * (4 * 2 * d + 2 * d * d)
    self_attn = 2 * q * d * d * 4 + 2 * 2 * q * q * d
    cross = 2 * tokens * d * d + 2 * q * d * (3 * n_off) + 2 * q * d * d
    ffn = 2 * 2 * q * d * f
    heads = 2 * q * d * cfg.num_classes + 2 * q * (2 * d * d + d * 4)
    return use_layers * (pos_head + self_attn + cross + ffn + heads)
