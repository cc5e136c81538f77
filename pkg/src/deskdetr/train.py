"""Training loop: AdamW with warmup, gradient clipping, EMA weights and periodic evaluation."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator

import numpy as np

from .autodiff import BatchNorm2d, Module, Parameter, backward
from .data import SceneBank, SyntheticScene, generate, heldout_split
from .errors import ConfigError, NumericError, StorageError
from .evaluation import evaluate_ap, ground_truths
from .losses import LossWeights, Targets, detection_loss
from .matching import CostWeights
from .model import RTDETR, predict
from .geometry import xyxy_to_cxcywh
from .query_selection import SCHEMES, SelectionStats, best_gt_iou, select_queries


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    backbone_lr: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_steps: int = 2000
    warmup_factor: float = 0.001
    lr_drop_step: int | None = None  # lr is multiplied by 0.1 from this step on
    clip_norm: float = 0.1
    freeze_backbone_bn: bool = True  # backbone BN keeps its statistics and affine terms fixed
    ema_decay: float = 0.9999
    ema_ramp: float = 2000.0  # effective decay = decay * (1 - exp(-updates / ramp)); 0 disables
    batch_size: int = 8
    steps: int = 20000
    seed: int = 0
    scheme: str = "uncertainty"
    num_scenes: int = 5000
    augment: bool = True
    eval_every: int = 0  # 0 disables periodic evaluation
    eval_scenes: int = 500
    log_every: int = 1

    def __post_init__(self):
        if not (self.lr > 0 and self.backbone_lr > 0):
            raise ConfigError("learning rates must be positive")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.weight_decay < 0 or self.warmup_steps < 0 or not 0 < self.warmup_factor <= 1:
            raise ConfigError("invalid weight decay or warmup settings")
        if self.batch_size < 1 or self.steps < 0 or self.num_scenes < 1 or self.log_every < 1:
            raise ConfigError("batch_size, num_scenes and log_every must be >= 1 and steps >= 0")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown query-selection scheme {self.scheme!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def lr_factor(step: int, cfg: TrainConfig) -> float:
    """Multiplier on the base rates: linear warmup from ``warmup_factor`` then an optional 10x drop."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        f = cfg.warmup_factor + (1.0 - cfg.warmup_factor) * step / cfg.warmup_steps
    else:
        f = 1.0
    if cfg.lr_drop_step is not None and step >= cfg.lr_drop_step:
        f *= 0.1
    return f


@dataclass
class ParamGroup:
    params: list[Parameter]
    lr: float
    weight_decay: float


def _frozen_bn(model: RTDETR) -> list[BatchNorm2d]:
    return [m for m in model.backbone.modules() if isinstance(m, BatchNorm2d)]


def set_train_mode(model: RTDETR, cfg: TrainConfig) -> None:
    model.train()
    if cfg.freeze_backbone_bn:
        for bn in _frozen_bn(model):
            bn.training = False


def param_groups(model: RTDETR, cfg: TrainConfig) -> list[ParamGroup]:
    """Backbone at its own rate; vectors (norm gains, biases) are exempt from weight decay.

    Frozen backbone BN parameters are left out entirely.
    """
    frozen = {id(p) for bn in _frozen_bn(model) for p in bn.parameters()} if cfg.freeze_backbone_bn else set()
    buckets: dict[tuple[bool, bool], list[Parameter]] = {}
    for name, p in model.named_parameters():
        if id(p) in frozen:
            continue
        key = (name.startswith("backbone."), p.ndim > 1)
        buckets.setdefault(key, []).append(p)
    groups = []
    for (is_backbone, decays), params in sorted(buckets.items()):
        groups.append(ParamGroup(params, cfg.backbone_lr if is_backbone else cfg.lr,
                                 cfg.weight_decay if decays else 0.0))
    return groups


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}
        self.v = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}

    def step(self, factor: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for g in self.groups:
            lr = g.lr * factor
            for p in g.params:
                if p.grad is None:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * np.square(p.grad)
                if g.weight_decay:
                    p.data *= 1.0 - lr * g.weight_decay
                p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
    if not math.isfinite(total):
        raise NumericError(f"non-finite gradient norm {total}")
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


class EMA:
    """Exponential moving average of every parameter and buffer of a model."""

    def __init__(self, model: Module, decay: float, ramp: float = 0.0):
        if not 0.0 <= decay <= 1.0:
            raise ConfigError("ema decay must lie in [0, 1]")
        self.decay = decay
        self.ramp = ramp
        self.updates = 0
        self.shadow = model.state_dict()

    def effective_decay(self) -> float:
        if self.ramp > 0:
            return self.decay * (1.0 - math.exp(-self.updates / self.ramp))
        return self.decay

    def update(self, model: Module) -> None:
        self.updates += 1
        d = self.effective_decay()
        for name, value in model.state_dict().items():
            s = self.shadow[name]
            if s.shape != value.shape:
                raise ConfigError(f"EMA shadow shape mismatch for {name}")
            s *= d
            s += (1.0 - d) * value

    def swap_in(self, model: Module) -> dict[str, np.ndarray]:
        """Load the shadow weights into ``model``; returns the live weights for restoring."""
        live = model.state_dict()
        model.load_state_dict(self.shadow)
        return live


@dataclass
class TrainState:
    model: RTDETR
    ema: EMA
    optimizer: AdamW
    cfg: TrainConfig
    step: int = 0
    log: list[dict] | None = None


def batch_order(seed: int, num_scenes: int, batch_size: int) -> Iterator[np.ndarray]:
    """Endless stream of scene-index batches from per-epoch seeded permutations."""
    epoch, pending = 0, np.zeros(0, dtype=np.int64)
    while True:
        while len(pending) < batch_size:
            perm = np.random.default_rng([seed, 1, epoch]).permutation(num_scenes)
            pending = np.concatenate([pending, perm])
            epoch += 1
        yield pending[:batch_size]
        pending = pending[batch_size:]


def evaluate_model(model: RTDETR, scenes: list[SyntheticScene], use_layers: int | None = None,
                   score_thr: float = 0.0) -> dict[str, float]:
    images = np.stack([s.image for s in scenes])
    dets = predict(model, images, score_thr=score_thr, use_layers=use_layers)
    return evaluate_ap(dets, ground_truths(scenes), model.cfg.num_classes, image_size=(images.shape[2], images.shape[3]))


def selection_stats(model: RTDETR, scenes: list[SyntheticScene], batch_size: int = 16) -> SelectionStats:
    """Class score and best-GT IoU of every encoder feature picked by query selection."""
    from .autodiff import no_grad

    stats = SelectionStats.empty()
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for start in range(0, len(scenes), batch_size):
                chunk = scenes[start:start + batch_size]
                memory = model.memory(np.stack([s.image for s in chunk]))
                sel = select_queries(model.enc_head, memory, model.anchors, model.cfg.decoder.num_queries)
                for k, scene in enumerate(chunk):
                    stats.extend(sel.scores[k], best_gt_iou(sel.boxes[k], xyxy_to_cxcywh(scene.boxes)))
    finally:
        model.train(was_training)
    return stats


def _check_finite(terms: dict[str, float], step: int) -> None:
    for name, value in terms.items():
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss term {name!r} = {value} at step {step}")


def train(model: RTDETR, cfg: TrainConfig, scenes: list[SyntheticScene] | None = None,
          heldout: list[SyntheticScene] | None = None, log_path: str | os.PathLike | None = None,
          weights: LossWeights = LossWeights(), cost: CostWeights = CostWeights(),
          callback: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Run ``cfg.steps`` optimization steps; deterministic given the seeds of ``cfg`` and the model.

    Loss records ``{step, total, cls, l1, giou, dn, lr}`` are appended to
    the log every ``log_every`` steps; evaluation records ``{step, eval}``
    use the EMA weights on the held-out scenes.
    """
    size = model.cfg.image_size
    if scenes is None:
        scenes = generate(cfg.seed, cfg.num_scenes, size, size)
    if not scenes:
        raise ConfigError("training set is empty")
    if heldout is None and cfg.eval_every:
        heldout = heldout_split(cfg.seed, cfg.eval_scenes, size, size)
    bank = SceneBank(scenes)
    set_train_mode(model, cfg)
    state = TrainState(model, EMA(model, cfg.ema_decay, cfg.ema_ramp),
                       AdamW(param_groups(model, cfg), cfg.betas, cfg.adam_eps), cfg, 0, [])
    params = [p for g in state.optimizer.groups for p in g.params]
    sink = None
    if log_path is not None:
        try:
            sink = open(log_path, "w", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open log {log_path}: {exc}") from exc

    def emit(record: dict) -> None:
        state.log.append(record)
        if sink is not None:
            sink.write(json.dumps(record, sort_keys=True) + "\n")
            sink.flush()
        if callback is not None:
            callback(state, record)

    try:
        order = batch_order(cfg.seed, len(bank), cfg.batch_size)
        for step in range(cfg.steps):
            idx = next(order)
            aug_seed = cfg.seed * 100_003 + step if cfg.augment else None
            images, labels, boxes = bank.batch(idx, aug_seed)
            targets = Targets(labels, boxes)
            out = model(images, targets, rng=np.random.default_rng([cfg.seed, 2, step]))
            res = detection_loss(out.layers, out.encoder, targets, weights, cfg.scheme,
                                 dn_layers=out.dn_layers, dn=out.dn, cost=cost)
            total = float(res.total.data)
            _check_finite({**res.terms, "total": total}, step)
            model.zero_grad()
            backward(res.total)
            clip_grad_norm(params, cfg.clip_norm)
            factor = lr_factor(step, cfg)
            state.optimizer.step(factor)
            state.ema.update(model)
            state.step = step + 1
            if state.step % cfg.log_every == 0 or state.step == cfg.steps:
                emit({"step": state.step, "total": total, **res.terms, "lr": cfg.lr * factor})
            if cfg.eval_every and (state.step % cfg.eval_every == 0 or state.step == cfg.steps):
                live = state.ema.swap_in(model)
                try:
                    metrics = evaluate_model(model, heldout)
                finally:
                    model.load_state_dict(live)
                    set_train_mode(model, cfg)
                emit({"step": state.step, "eval": metrics})
    finally:
        if sink is not None:
            sink.close()
    model.zero_grad()
    return state
