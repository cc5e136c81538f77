"""Figures for benchmark and analysis outputs, rendered next to their CSV/JSONL sources."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import StorageError  # noqa: E402

HEADERS = {
    ("conf", "iou", "count", "nms_ns_median", "nms_ns_mean"): "nms_sweep",
    ("layers", "ap", "latency_ns"): "layer_sweep",
    ("cls_score", "iou_score", "scheme"): "scatter",
    ("variant", "params", "flops"): "variants",
}


def _read_csv(path: Path) -> tuple[tuple[str, ...], list[dict[str, str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            return tuple(reader.fieldnames or ()), rows
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def _save(fig, out: Path) -> Path:
    try:
        fig.tight_layout()
        fig.savefig(out, dpi=110)
    except OSError as exc:
        raise StorageError(f"cannot write {out}: {exc}") from exc
    finally:
        plt.close(fig)
    return out


def plot_nms_sweep(rows: list[dict[str, str]], out: Path) -> Path:
    confs = sorted({float(r["conf"]) for r in rows})
    ious = sorted({float(r["iou"]) for r in rows})
    counts = [next(int(r["count"]) for r in rows if float(r["conf"]) == c) for c in confs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.bar(range(len(confs)), counts, color="#4878cf")
    ax1.set_xticks(range(len(confs)), [f"{c:g}" for c in confs], rotation=45)
    ax1.set_xlabel("confidence threshold")
    ax1.set_ylabel("remaining boxes")
    for i in ious:
        pts = sorted((float(r["conf"]), float(r["nms_ns_median"]) / 1e6) for r in rows if float(r["iou"]) == i)
        ax2.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"IoU {i:g}")
    ax2.set_xscale("log")
    ax2.set_xlabel("confidence threshold")
    ax2.set_ylabel("median NMS time (ms)")
    ax2.legend(fontsize=8)
    return _save(fig, out)


def plot_layer_sweep(rows: list[dict[str, str]], out: Path) -> Path:
    layers = [int(r["layers"]) for r in rows]
    fig, ax1 = plt.subplots(figsize=(5, 4))
    ax1.plot(layers, [float(r["ap"]) for r in rows], marker="o", color="#4878cf")
    ax1.set_xlabel("decoder layers used")
    ax1.set_ylabel("AP", color="#4878cf")
    ax2 = ax1.twinx()
    ax2.plot(layers, [float(r["latency_ns"]) / 1e6 for r in rows], marker="s", color="#d65f5f")
    ax2.set_ylabel("latency (ms)", color="#d65f5f")
    ax1.set_xticks(layers)
    return _save(fig, out)


def plot_scatter(rows: list[dict[str, str]], out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for scheme, color in (("vanilla", "#4878cf"), ("uncertainty", "#d65f5f")):
        pts = [(float(r["cls_score"]), float(r["iou_score"])) for r in rows if r["scheme"] == scheme]
        if pts:
            ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=6, alpha=0.5, color=color, label=scheme)
    ax.set_xlabel("classification score")
    ax.set_ylabel("IoU with best ground truth")
    ax.set_xlim(0.5, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    return _save(fig, out)


def plot_variants(rows: list[dict[str, str]], out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([r["variant"] for r in rows], [int(r["flops"]) / 1e9 for r in rows], color="#6acc65")
    ax.set_ylabel("encoder GFLOPs")
    ax.set_xlabel("encoder variant")
    return _save(fig, out)


def plot_training_log(path: Path, out: Path) -> Path:
    losses, evals = [], []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                (evals if "eval" in rec else losses).append(rec)
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "cls", "l1", "giou", "dn"):
        ax1.plot([r["step"] for r in losses], [r[key] for r in losses], label=key, linewidth=0.8)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    for key in ("AP", "AP50"):
        ax2.plot([r["step"] for r in evals], [r["eval"][key] for r in evals], marker="o", label=key)
    ax2.set_xlabel("step")
    ax2.set_ylabel("held-out AP (EMA weights)")
    ax2.set_ylim(0, 1)
    ax2.legend()
    return _save(fig, out)


_PLOTTERS = {"nms_sweep": plot_nms_sweep, "layer_sweep": plot_layer_sweep, "scatter": plot_scatter,
             "variants": plot_variants}


def render(path: str | os.PathLike) -> Path | None:
    """Render the figure for one CSV or JSONL log as ``<stem>.png`` beside it; None if unrecognized."""
    path = Path(path)
    out = path.with_suffix(".png")
    if path.suffix == ".jsonl":
        return plot_training_log(path, out)
    if path.suffix != ".csv":
        return None
    header, rows = _read_csv(path)
    kind = HEADERS.get(header)
    if kind is None or not rows:
        return None
    return _PLOTTERS[kind](rows, out)


def render_directory(directory: str | os.PathLike) -> list[Path]:
    """Render every recognized CSV and JSONL file in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise StorageError(f"{directory} is not a directory")
    written = []
    for path in sorted(directory.iterdir()):
        if path.suffix in (".csv", ".jsonl"):
            out = render(path)
            if out is not None:
                written.append(out)
    return written
