"""Latency benchmarks: end-to-end protocol, NMS threshold sweeps and the decoder-depth sweep.

All timings use ``time.perf_counter_ns`` (monotonic) and report medians next
to means. Inputs are fully materialized before any timed region and no
output is serialized inside one.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .autodiff import no_grad
from .data import SyntheticScene
from .errors import ConfigError, StorageError
from .geometry import count_remaining, nms_arrays, score_filter
from .model import RTDETR, postprocess

DEFAULT_CONFS = (0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.15, 0.2, 0.25)
DEFAULT_IOUS = (0.4, 0.5, 0.6, 0.7, 0.8)
POST_MODES = ("none", "nms")


# -- synthetic raw-detection corpus -------------------------------------------

@dataclass
class BoxCorpus:
    boxes: np.ndarray  # [N, 4] normalized xyxy
    scores: np.ndarray  # [N]
    labels: np.ndarray  # [N]

    def __len__(self) -> int:
        return len(self.scores)


def clustered_corpus(seed: int = 0, count: int = 10_000, clusters: int = 200, num_classes: int = 3) -> BoxCorpus:
    """Raw detections drawn around a few hundred objects so that many boxes overlap.

    Scores are log-uniform on [10^-3.5, 1] so every confidence threshold in
    the usual sweep range removes a sizeable share of the corpus.
    """
    if count < 1 or clusters < 1:
        raise ConfigError("corpus needs at least one box and one cluster")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.1, 0.9, size=(clusters, 2))
    sizes = np.exp(rng.uniform(np.log(0.03), np.log(0.3), size=(clusters, 2)))
    cluster_labels = rng.integers(0, num_classes, clusters)
    owner = rng.integers(0, clusters, count)
    wh = sizes[owner] * np.exp(rng.normal(0.0, 0.08, size=(count, 2)))
    c = centers[owner] + rng.normal(0.0, 0.05, size=(count, 2)) * sizes[owner]
    boxes = np.clip(np.concatenate([c - wh / 2, c + wh / 2], axis=1), 0.0, 1.0)
    scores = 10.0 ** rng.uniform(-3.5, 0.0, count)
    return BoxCorpus(boxes, scores, cluster_labels[owner])


def expand_outputs(logits: np.ndarray, boxes_xyxy: np.ndarray) -> BoxCorpus:
    """Turn one image's [Q, C] logits and [Q, 4] boxes into Q*C scored candidates."""
    q, c = logits.shape
    scores = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64).reshape(-1)))
    return BoxCorpus(np.repeat(boxes_xyxy, c, axis=0), scores, np.tile(np.arange(c), q))


# -- timing helpers ------------------------------------------------------------

def time_ns(fn: Callable[[], object], reps: int, warmup: int = 0) -> np.ndarray:
    """Per-call durations in ns for ``reps`` calls after ``warmup`` untimed calls."""
    if reps < 1 or warmup < 0:
        raise ConfigError("reps must be >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    out = np.empty(reps, dtype=np.int64)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        out[i] = time.perf_counter_ns() - t0
    return out


@dataclass(frozen=True)
class SweepRow:
    conf: float
    iou: float
    count: int
    nms_ns_median: float
    nms_ns_mean: float


def nms_sweep(corpus: BoxCorpus, confs: Sequence[float] = DEFAULT_CONFS, ious: Sequence[float] = DEFAULT_IOUS,
              reps: int = 30, warmup: int = 2) -> list[SweepRow]:
    """Remaining-box counts and NMS timings over a threshold grid.

    Timings are gathered round-robin over the grid (one call per cell per
    round) so that slow drift of the machine spreads evenly over all cells.
    """
    if not len(corpus):
        raise ConfigError("detection corpus is empty")
    if reps < 30:
        raise ConfigError("NMS timing needs at least 30 repetitions")
    grid = [(float(c), float(i)) for c in confs for i in ious]
    for c, i in grid:
        if not (0 <= c <= 1 and 0 <= i <= 1):
            raise ConfigError(f"thresholds must lie in [0, 1], got conf={c}, iou={i}")
    calls = {cell: (lambda c=cell[0], i=cell[1]: nms_arrays(corpus.boxes, corpus.scores, corpus.labels, c, i))
             for cell in grid}
    for fn in calls.values():
        for _ in range(warmup):
            fn()
    samples = {cell: np.empty(reps, dtype=np.int64) for cell in grid}
    for r in range(reps):
        for cell, fn in calls.items():
            t0 = time.perf_counter_ns()
            fn()
            samples[cell][r] = time.perf_counter_ns() - t0
    return [SweepRow(c, i, count_remaining(corpus.scores, c), float(np.median(samples[(c, i)])),
                     float(np.mean(samples[(c, i)]))) for c, i in grid]


def trend_correlations(rows: Sequence[SweepRow]) -> dict[str, float]:
    """Spearman correlations of the sweep.

    ``count_vs_conf`` uses every row. ``time_vs_conf`` ranks each confidence
    by its median time averaged over IoU thresholds; ``time_vs_iou`` ranks
    each IoU threshold by its median time averaged over confidences.
    """
    confs = sorted({r.conf for r in rows})
    ious = sorted({r.iou for r in rows})
    t_conf = [np.mean([r.nms_ns_median for r in rows if r.conf == c]) for c in confs]
    t_iou = [np.mean([r.nms_ns_median for r in rows if r.iou == i]) for i in ious]

    def rho(a, b) -> float:
        return float(spearmanr(a, b).statistic) if len(a) > 1 else float("nan")

    return {
        "count_vs_conf": rho([r.conf for r in rows], [r.count for r in rows]),
        "time_vs_conf": rho(confs, t_conf),
        "time_vs_iou": rho(ious, t_iou),
    }


def paired_post_timing(corpus: BoxCorpus, conf: float = 0.001, iou: float = 0.7, score_thr: float = 0.001,
                       reps: int = 30) -> tuple[float, float]:
    """Median ns of NMS and of NMS-free score filtering, interleaved on the same corpus."""
    nms_t, free_t = np.empty(reps), np.empty(reps)
    for r in range(reps):
        t0 = time.perf_counter_ns()
        nms_arrays(corpus.boxes, corpus.scores, corpus.labels, conf, iou)
        t1 = time.perf_counter_ns()
        score_filter(corpus.scores, score_thr)
        t2 = time.perf_counter_ns()
        nms_t[r], free_t[r] = t1 - t0, t2 - t1
    return float(np.median(nms_t)), float(np.median(free_t))


def write_sweep_csv(rows: Sequence[SweepRow], path: str | os.PathLike) -> None:
    _write_csv(path, ["conf", "iou", "count", "nms_ns_median", "nms_ns_mean"],
               [[f"{r.conf:g}", f"{r.iou:g}", r.count, f"{r.nms_ns_median:.0f}", f"{r.nms_ns_mean:.0f}"]
                for r in rows])


def write_count_svg(rows: Sequence[SweepRow], path: str | os.PathLike, width: int = 480, height: int = 260) -> None:
    """Bar chart of remaining boxes per confidence threshold as a standalone SVG."""
    counts: dict[float, int] = {}
    for r in rows:
        counts.setdefault(r.conf, r.count)
    items = sorted(counts.items())
    top = max([c for _, c in items] + [1])
    pad, base = 40, height - 40
    bar = (width - 2 * pad) / max(len(items), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-size="10">',
             f'<line x1="{pad}" y1="{base}" x2="{width - pad}" y2="{base}" stroke="black"/>']
    for k, (conf, count) in enumerate(items):
        h = (base - pad) * count / top
        x = pad + k * bar
        parts.append(f'<rect x="{x + 2:.1f}" y="{base - h:.1f}" width="{bar - 4:.1f}" height="{h:.1f}" fill="#4878cf"/>')
        parts.append(f'<text x="{x + bar / 2:.1f}" y="{base + 14}" text-anchor="middle">{conf:g}</text>')
        parts.append(f'<text x="{x + bar / 2:.1f}" y="{base - h - 3:.1f}" text-anchor="middle">{count}</text>')
    parts.append(f'<text x="{width / 2}" y="{height - 6}" text-anchor="middle">confidence threshold</text>')
    parts.append("</svg>")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


# -- end-to-end protocol --------------------------------------------------------

@dataclass(frozen=True)
class BenchRecord:
    sample: int
    model_ns: int
    post_ns: int
    detections: int

    @property
    def total_ns(self) -> int:
        return self.model_ns + self.post_ns


@dataclass
class BenchReport:
    records: list[BenchRecord]  # post-warmup only
    post: str

    def stats(self) -> dict[str, float]:
        if not self.records:
            return {}
        arr = {k: np.array([getattr(r, k) for r in self.records], dtype=np.float64)
               for k in ("model_ns", "post_ns", "total_ns")}
        out = {}
        for k, v in arr.items():
            out[f"{k}_mean"] = float(v.mean())
            out[f"{k}_median"] = float(np.median(v))
        out["samples"] = len(self.records)
        return out


def post_process(logits: np.ndarray, boxes_cxcywh: np.ndarray, post: str, conf: float, iou: float,
                 score_thr: float) -> int:
    """Run one post-processing path on raw outputs; returns the number of detections kept."""
    if post == "none":
        return len(postprocess(logits, boxes_cxcywh, score_thr))
    if post == "nms":
        from .geometry import cxcywh_to_xyxy

        cand = expand_outputs(logits, np.clip(cxcywh_to_xyxy(np.asarray(boxes_cxcywh, dtype=np.float64)), 0, 1))
        return len(nms_arrays(cand.boxes, cand.scores, cand.labels, conf, iou))
    raise ConfigError(f"unknown post-processing mode {post!r}; expected one of {POST_MODES}")


def bench_end_to_end(model: RTDETR, images: np.ndarray, post: str = "none", conf: float = 0.001, iou: float = 0.7,
                     score_thr: float = 0.001, warmup: int = 10, reps: int = 1,
                     use_layers: int | None = None) -> BenchReport:
    """Batch-1 latency over ``images`` ([N, 3, H, W], preloaded) for ``reps`` passes.

    The first ``warmup`` iterations are run but discarded.
    """
    if post not in POST_MODES:
        raise ConfigError(f"unknown post-processing mode {post!r}; expected one of {POST_MODES}")
    if warmup < 0 or reps < 1 or len(images) == 0:
        raise ConfigError("need warmup >= 0, reps >= 1 and at least one image")
    images = np.ascontiguousarray(images, dtype=np.float32)
    model.eval()
    records, it = [], 0
    with no_grad():
        for _ in range(reps):
            for k in range(len(images)):
                t0 = time.perf_counter_ns()
                out = model(images[k:k + 1], use_layers=use_layers)
                t1 = time.perf_counter_ns()
                n = post_process(out.final.logits.data[0], out.final.boxes.data[0], post, conf, iou, score_thr)
                t2 = time.perf_counter_ns()
                if it >= warmup:
                    records.append(BenchRecord(k, t1 - t0, t2 - t1, n))
                it += 1
    return BenchReport(records, post)


# -- decoder depth sweep -----------------------------------------------------------

@dataclass(frozen=True)
class LayerRow:
    layers: int
    ap: float
    ap50: float
    latency_ns: float  # median batch-1 forward time


def layer_latencies(model: RTDETR, images: np.ndarray, reps: int = 5, warmup: int = 3) -> dict[int, float]:
    """Median batch-1 forward time per decoder depth, interleaving depths for each image."""
    depths = range(1, model.cfg.decoder.num_layers + 1)
    samples: dict[int, list[int]] = {d: [] for d in depths}
    model.eval()
    images = np.ascontiguousarray(images, dtype=np.float32)
    with no_grad():
        for _ in range(warmup):
            for d in depths:
                model(images[:1], use_layers=d)
        for _ in range(reps):
            for k in range(len(images)):
                x = images[k:k + 1]
                for d in depths:
                    t0 = time.perf_counter_ns()
                    model(x, use_layers=d)
                    samples[d].append(time.perf_counter_ns() - t0)
    return {d: float(np.median(v)) for d, v in samples.items()}


def decoder_layer_sweep(model: RTDETR, scenes: list[SyntheticScene], timing_images: int = 20,
                        reps: int = 5) -> list[LayerRow]:
    """AP on ``scenes`` and batch-1 latency for every decoder depth 1..num_layers."""
    from .train import evaluate_model

    if not scenes:
        raise ConfigError("layer sweep needs at least one scene")
    images = np.stack([s.image for s in scenes[:timing_images]])
    lat = layer_latencies(model, images, reps)
    rows = []
    for d in range(1, model.cfg.decoder.num_layers + 1):
        m = evaluate_model(model, scenes, use_layers=d)
        rows.append(LayerRow(d, m["AP"], m["AP50"], lat[d]))
    return rows


def write_layer_csv(rows: Sequence[LayerRow], path: str | os.PathLike) -> None:
    _write_csv(path, ["layers", "ap", "latency_ns"], [[r.layers, f"{r.ap:.6f}", f"{r.latency_ns:.0f}"] for r in rows])


def _write_csv(path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
