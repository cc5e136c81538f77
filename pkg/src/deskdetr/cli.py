"""Command-line entry point: ``deskdetr <command> [options]``.

Exit codes: 0 success, 1 other package error, 2 configuration error,
3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DeskDetrError, StorageError

EXIT_OK = 0


# -- helpers -------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ensure_parent(path: str | os.PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {path.parent}: {exc}") from exc
    return path


def _write_json(path: str | os.PathLike, data: dict) -> None:
    path = _ensure_parent(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _echo_config(out: str | os.PathLike, command: str, settings: dict) -> Path:
    """Write the effective settings of a command as ``<out stem>.config.json`` beside ``out``."""
    out = Path(out)
    side = out.with_name(out.stem + ".config.json")
    _write_json(side, {"command": command, "version": __version__, **settings})
    return side


def _args_dict(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def _load_model(path: str, weights: str = "ema"):
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path)
    if weights not in ("ema", "live"):
        raise ConfigError(f"--weights must be 'ema' or 'live', got {weights!r}")
    return ckpt, ckpt.build_model(use_ema=weights == "ema")


def _heldout(ckpt, count: int):
    from .data import heldout_split

    seed = int(ckpt.config.get("train", {}).get("seed", 0))
    size = ckpt.model_config.image_size
    return heldout_split(seed, count, size, size)


# -- commands --------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    from .checkpoint import checkpoint_from, save_checkpoint
    from .config import override_dict, resolve, write_config
    from .model import RTDETR
    from .report import render
    from .train import evaluate_model, train

    flags: dict = override_dict(args.set or [])
    train_flags = flags.setdefault("train", {})
    if args.seed is not None:
        train_flags["seed"] = args.seed
    if args.steps is not None:
        train_flags["steps"] = args.steps
    if args.query_selection is not None:
        train_flags["scheme"] = args.query_selection
    if args.variant is not None:
        flags.setdefault("model", {}).setdefault("encoder", {})["variant"] = args.variant
    cfg = resolve(args.preset, args.config, flags)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out}: {exc}") from exc
    write_config(cfg, out / "config.yaml")
    if not args.quiet:
        print(f"effective config written to {out / 'config.yaml'}")

    def progress(state, record):
        if args.quiet:
            return
        if "eval" in record:
            print(f"step {record['step']}: " + " ".join(f"{k}={v:.4f}" for k, v in record["eval"].items()), flush=True)
        elif record["step"] % max(args.print_every, 1) == 0:
            print(f"step {record['step']}: loss {record['total']:.4f} lr {record['lr']:.2e}", flush=True)

    model = RTDETR(cfg.model, seed=cfg.train.seed)
    wall0, cpu0 = time.perf_counter(), time.process_time()
    state = train(model, cfg.train, log_path=out / "log.jsonl", weights=cfg.loss, cost=cfg.cost, callback=progress)
    timing = {"wall_seconds": time.perf_counter() - wall0, "cpu_seconds": time.process_time() - cpu0}
    ckpt = checkpoint_from(model, state.ema.shadow, state.step, cfg.to_dict())
    save_checkpoint(out / "model.ckpt", ckpt)
    metrics = {}
    if cfg.train.eval_scenes > 0:
        ema_model = ckpt.build_model(use_ema=True)
        metrics = evaluate_model(ema_model, _heldout(ckpt, cfg.train.eval_scenes))
    _write_json(out / "metrics.json", {"step": state.step, "eval": metrics, "train_time": timing,
                                       "config": cfg.to_dict()})
    render(out / "log.jsonl")
    print(json.dumps({"step": state.step, **metrics}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .train import evaluate_model

    ckpt, model = _load_model(args.ckpt, args.weights)
    metrics = evaluate_model(model, _heldout(ckpt, args.scenes), use_layers=args.layers, score_thr=args.score_thr)
    for key, value in metrics.items():
        print(f"{key:6s} {value:.4f}")
    if args.out:
        _write_json(args.out, {"eval": metrics, "settings": _args_dict(args), "config": ckpt.config})
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from .bench import bench_end_to_end

    ckpt, model = _load_model(args.ckpt, args.weights)
    images = np.stack([s.image for s in _heldout(ckpt, args.images)])
    report = bench_end_to_end(model, images, args.post, args.conf, args.iou, args.score_thr, args.warmup, args.reps)
    stats = report.stats()
    print(json.dumps(stats, indent=2, sort_keys=True))
    if args.out:
        _write_json(args.out, {"stats": stats, "records": [asdict(r) for r in report.records],
                               "settings": _args_dict(args), "config": ckpt.config})
    return EXIT_OK


def cmd_nms_sweep(args: argparse.Namespace) -> int:
    from .bench import (BoxCorpus, clustered_corpus, nms_sweep, paired_post_timing, trend_correlations,
                        write_count_svg, write_sweep_csv)
    from .geometry import detections_to_arrays, read_detections
    from .report import render

    if args.dets == "synthetic":
        corpus = clustered_corpus(args.seed, args.boxes)
    else:
        try:
            dets = read_detections(args.dets)
        except (OSError, ValueError) as exc:
            raise StorageError(f"cannot read detections from {args.dets}: {exc}") from exc
        corpus = BoxCorpus(*detections_to_arrays(dets))
    rows = nms_sweep(corpus, args.conf_list, args.iou_list, reps=args.reps)
    out = _ensure_parent(args.out)
    write_sweep_csv(rows, out)
    write_count_svg(rows, out.with_suffix(".svg"))
    render(out)
    trends = trend_correlations(rows)
    nms_ns, free_ns = paired_post_timing(corpus, reps=args.reps)
    summary = {**trends, "nms_ns_median": nms_ns, "nms_free_ns_median": free_ns, "boxes": len(corpus)}
    _echo_config(out, "nms-sweep", {"settings": _args_dict(args), "summary": summary})
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_layer_sweep(args: argparse.Namespace) -> int:
    from .bench import decoder_layer_sweep, write_layer_csv
    from .report import render

    ckpt, model = _load_model(args.ckpt, args.weights)
    rows = decoder_layer_sweep(model, _heldout(ckpt, args.scenes), args.timing_images, args.reps)
    out = _ensure_parent(args.out)
    write_layer_csv(rows, out)
    render(out)
    _echo_config(out, "layer-sweep", {"settings": _args_dict(args), "config": ckpt.config})
    for r in rows:
        print(f"layers={r.layers} AP={r.ap:.4f} AP50={r.ap50:.4f} latency_ms={r.latency_ns / 1e6:.2f}")
    return EXIT_OK


def cmd_scatter(args: argparse.Namespace) -> int:
    from .query_selection import export_scatter, prop_metrics
    from .report import render
    from .train import selection_stats

    wanted = ("vanilla", "uncertainty") if args.scheme == "both" else (args.scheme,)
    if len(args.ckpt) != len(wanted):
        raise ConfigError(f"--scheme {args.scheme} needs {len(wanted)} checkpoint(s), got {len(args.ckpt)}")
    rows, summary, configs = {}, {}, {}
    for path in args.ckpt:
        ckpt, model = _load_model(path, args.weights)
        scheme = ckpt.config.get("train", {}).get("scheme", "uncertainty")
        if scheme not in wanted or scheme in rows:
            raise ConfigError(f"checkpoint {path} was trained with scheme {scheme!r}; expected one each of {wanted}")
        stats = selection_stats(model, _heldout(ckpt, args.scenes))
        rows[scheme] = stats
        p_cls, p_both = prop_metrics(stats.cls_scores, stats.ious, args.threshold)
        summary[scheme] = {"prop_cls": p_cls, "prop_both": p_both, "features": int(stats.cls_scores.size)}
        configs[scheme] = ckpt.config
    out = _ensure_parent(args.out)
    export_scatter(rows, out, args.threshold)
    render(out)
    _echo_config(out, "scatter", {"settings": _args_dict(args), "summary": summary, "configs": configs})
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def max_score_difference(a, b, images: np.ndarray) -> float:
    """Largest absolute difference between the final-layer class scores of two models."""
    from .autodiff import no_grad

    with no_grad():
        la = a(images).final.logits.data.astype(np.float64)
        lb = b(images).final.logits.data.astype(np.float64)
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))  # noqa: E731
    return float(np.max(np.abs(sig(la) - sig(lb))))


def cmd_reparam(args: argparse.Namespace) -> int:
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    if ckpt.deploy:
        raise ConfigError(f"{args.ckpt} is already a deploy-mode checkpoint")
    folded = {}
    for group in ("live", "ema"):
        if group == "ema" and not ckpt.ema:
            continue
        model = ckpt.build_model(use_ema=group == "ema")
        reference = ckpt.build_model(use_ema=group == "ema")
        model.reparameterize()
        folded[group] = model.state_dict()
        if group == "live":
            images = np.stack([s.image for s in _heldout(ckpt, args.check_images)])
            diff = max_score_difference(reference, model, images)
    out = Checkpoint(ckpt.model_config, ckpt.step, True, folded["live"], folded.get("ema", {}), ckpt.config)
    save_checkpoint(_ensure_parent(args.out), out)
    _echo_config(args.out, "reparam", {"settings": _args_dict(args), "max_score_diff": diff, "config": ckpt.config})
    print(json.dumps({"out": str(args.out), "max_score_diff": diff}))
    return EXIT_OK


def cmd_flops(args: argparse.Namespace) -> int:
    from .encoder import EncoderConfig, variant_costs, write_variant_csv
    from .report import render

    rows = variant_costs(EncoderConfig(), args.image_size, args.image_size, build=not args.no_params)
    for r in rows:
        print(f"{r.variant:5s} params={r.params:>10d} GFLOPs={r.flops / 1e9:.3f}")
    if args.out:
        out = _ensure_parent(args.out)
        write_variant_csv(rows, out)
        render(out)
        _echo_config(out, "flops", {"settings": _args_dict(args), "encoder": asdict(EncoderConfig())})
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .report import render_directory

    written = render_directory(args.directory)
    for path in written:
        print(path)
    _echo_config(Path(args.directory) / "report", "report",
                 {"settings": _args_dict(args), "figures": [p.name for p in written]})
    return EXIT_OK


def cmd_dump(args: argparse.Namespace) -> int:
    from .data import dump, generate, heldout_split

    scenes = heldout_split(args.seed, args.count) if args.heldout else generate(args.seed, args.count)
    try:
        path = dump(scenes, args.out)
    except OSError as exc:
        raise StorageError(f"cannot write scenes to {args.out}: {exc}") from exc
    _echo_config(path, "dump", {"settings": _args_dict(args)})
    print(path)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .bench import DEFAULT_CONFS, DEFAULT_IOUS, POST_MODES
    from .config import PRESETS
    from .encoder import VARIANTS
    from .query_selection import SCHEMES

    p = argparse.ArgumentParser(prog="deskdetr", description="Desk-scale real-time detection transformer toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def ckpt_args(sp, weights=True):
        sp.add_argument("--ckpt", required=True, help="checkpoint file")
        if weights:
            sp.add_argument("--weights", choices=("ema", "live"), default="ema", help="which weights to use")

    sp = sub.add_parser("train", help="train a model and write a checkpoint, log and metrics")
    sp.add_argument("--config", help="YAML or JSON file with model/train/loss/cost sections")
    sp.add_argument("--preset", choices=sorted(PRESETS), default="toy", help="base recipe applied before --config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--query-selection", choices=SCHEMES)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.lr=2e-4 (repeatable)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--print-every", type=int, default=100)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="AP on the held-out split")
    ckpt_args(sp)
    sp.add_argument("--layers", type=int, help="decoder layers to run (default: all)")
    sp.add_argument("--score-thr", type=float, default=0.0)
    sp.add_argument("--scenes", type=int, default=500)
    sp.add_argument("--out", help="optional JSON output")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="end-to-end batch-1 latency")
    ckpt_args(sp)
    sp.add_argument("--post", choices=POST_MODES, default="none")
    sp.add_argument("--conf", type=float, default=0.001, help="NMS confidence threshold")
    sp.add_argument("--iou", type=float, default=0.7, help="NMS IoU threshold")
    sp.add_argument("--score-thr", type=float, default=0.001, help="NMS-free score threshold")
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--reps", type=int, default=1, help="passes over the images")
    sp.add_argument("--images", type=int, default=50)
    sp.add_argument("--out", help="optional JSON output")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("nms-sweep", help="remaining boxes and NMS time over a threshold grid")
    sp.add_argument("--dets", default="synthetic", help="'synthetic' or a detection file (one per line)")
    sp.add_argument("--conf-list", type=_float_list, default=list(DEFAULT_CONFS))
    sp.add_argument("--iou-list", type=_float_list, default=list(DEFAULT_IOUS))
    sp.add_argument("--reps", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--boxes", type=int, default=10_000, help="synthetic corpus size")
    sp.add_argument("--out", required=True, help="CSV path; SVG and PNG are written beside it")
    sp.set_defaults(func=cmd_nms_sweep)

    sp = sub.add_parser("layer-sweep", help="AP and latency for every decoder depth")
    ckpt_args(sp)
    sp.add_argument("--scenes", type=int, default=500)
    sp.add_argument("--timing-images", type=int, default=20)
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_layer_sweep)

    sp = sub.add_parser("scatter", help="class score vs IoU of selected encoder features")
    sp.add_argument("--ckpt", action="append", required=True, help="checkpoint (repeat once per scheme)")
    sp.add_argument("--weights", choices=("ema", "live"), default="ema")
    sp.add_argument("--scheme", choices=("both",) + SCHEMES, default="both")
    sp.add_argument("--scenes", type=int, default=500)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_scatter)

    sp = sub.add_parser("reparam", help="fold RepConv branches into a deploy-mode checkpoint")
    ckpt_args(sp, weights=False)
    sp.add_argument("--check-images", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_reparam)

    sp = sub.add_parser("flops", help="analytic encoder cost of every variant")
    sp.add_argument("--image-size", type=int, default=640)
    sp.add_argument("--no-params", action="store_true", help="skip building encoders to count parameters")
    sp.add_argument("--out", help="optional CSV output")
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("report", help="render figures for every CSV/JSONL output in a directory")
    sp.add_argument("directory")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("dump", help="write synthetic scenes as PPM images plus annotations.json")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--heldout", action="store_true", help="dump the held-out split instead")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DeskDetrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
