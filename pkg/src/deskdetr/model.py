"""Detector assembly: backbone, hybrid encoder, query selection and decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .autodiff import Embedding, Module, Tensor
from .autodiff import functional as F
from .backbone import BackboneConfig, TinyBackbone, backbone_flops
from .data import NUM_CLASSES
from .decoder import Decoder, DecoderConfig, DenoisingBatch, LayerOutput, decoder_flops, make_denoising_batch
from .encoder import EncoderConfig, HybridEncoder, encoder_flops, flatten_tokens
from .errors import ConfigError
from .geometry import Detection, cxcywh_to_xyxy, score_order
from .query_selection import EncoderHead, SelectedQueries, head_flops, make_anchors, select_queries, token_count


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 96
    num_classes: int = NUM_CLASSES
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(embed_dim=128, nheads=8, ffn_dim=512,
                                                                          width_mult=0.5))
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(
        num_layers=3, num_queries=100, embed_dim=128, ffn_dim=512, num_classes=NUM_CLASSES))

    def __post_init__(self):
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 32")
        if self.encoder.in_channels != self.backbone.pyramid_channels:
            raise ConfigError(f"encoder in_channels {self.encoder.in_channels} != backbone {self.backbone.pyramid_channels}")
        if self.encoder.embed_dim != self.decoder.embed_dim:
            raise ConfigError("encoder and decoder embed_dim differ")
        if self.decoder.num_classes != self.num_classes:
            raise ConfigError("decoder num_classes differs from model num_classes")
        tokens = token_count(self.image_size, self.image_size)
        if self.decoder.num_queries > tokens:
            raise ConfigError(f"{self.decoder.num_queries} queries exceed the {tokens} encoder tokens")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        sub = {}
        for key, typ in (("backbone", BackboneConfig), ("encoder", EncoderConfig), ("decoder", DecoderConfig)):
            if key in d:
                sub[key] = _sub_config(typ, d.pop(key))
        return cls(**d, **sub)


def _sub_config(typ, value):
    if isinstance(value, typ):
        return value
    known = {f.name for f in fields(typ)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return typ(**kwargs)


@dataclass
class ModelOutput:
    layers: list[LayerOutput]  # matching queries, one per executed decoder layer
    encoder: LayerOutput  # top-K encoder-head predictions
    selected: SelectedQueries
    dn_layers: list[LayerOutput] | None = None
    dn: DenoisingBatch | None = None

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


class RTDETR(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = TinyBackbone(cfg.backbone, rng)
        self.encoder = HybridEncoder(cfg.encoder, rng)
        self.enc_head = EncoderHead(cfg.encoder.embed_dim, cfg.num_classes, rng)
        self.decoder = Decoder(cfg.decoder, rng)
        self.dn_embed = Embedding(cfg.num_classes + 1, cfg.decoder.embed_dim, rng)
        s = cfg.image_size
        self.shapes = [(s // 8, s // 8), (s // 16, s // 16), (s // 32, s // 32)]
        self.anchors = make_anchors(self.shapes)

    @property
    def deployed(self) -> bool:
        from .encoder import RepConv

        reps = [m for m in self.modules() if isinstance(m, RepConv)]
        return bool(reps) and all(m.deployed for m in reps)

    def memory(self, images) -> Tensor:
        feats = self.backbone(images)
        fused = self.encoder(feats)
        shapes = [tuple(f.shape[-2:]) for f in fused]
        if shapes != self.shapes:
            raise ConfigError(f"input produced pyramid {shapes}, model expects {self.shapes}")
        return F.concat([flatten_tokens(f) for f in fused], axis=1)

    def forward(self, images, targets=None, use_layers: int | None = None,
                rng: np.random.Generator | None = None) -> ModelOutput:
        """Full forward pass. Denoising queries are added when ``targets`` are given in training mode."""
        memory = self.memory(images)
        dcfg = self.cfg.decoder
        sel = select_queries(self.enc_head, memory, self.anchors, dcfg.num_queries)
        enc_out = LayerOutput(sel.logits, F.sigmoid(sel.box_logits))
        # the encoder head is trained by its own loss; decoder gradients stop at the reference boxes
        tgt, ref, mask, dn = sel.content, sel.box_logits.detach(), None, None
        if self.training and targets is not None and dcfg.dn_number > 0:
            dn = make_denoising_batch(targets.labels, targets.boxes, dcfg.num_queries, self.cfg.num_classes,
                                      dcfg.dn_number, dcfg.label_noise_ratio, dcfg.box_noise_scale, rng)
        if dn is not None:
            tgt = F.concat([self.dn_embed(dn.labels), tgt], axis=1)
            ref = F.concat([Tensor(dn.box_logits.astype(ref.dtype)), ref], axis=1)
            mask = dn.mask
        outs = self.decoder(tgt, ref, memory, self.shapes, mask=mask, use_layers=use_layers)
        if dn is None:
            return ModelOutput(outs, enc_out, sel)
        s = dn.size
        dn_layers = [LayerOutput(o.logits[:, :s], o.boxes[:, :s]) for o in outs]
        layers = [LayerOutput(o.logits[:, s:], o.boxes[:, s:]) for o in outs]
        return ModelOutput(layers, enc_out, sel, dn_layers, dn)

    def reparameterize(self) -> int:
        return self.encoder.reparameterize()

    def flops(self, use_layers: int | None = None) -> int:
        s = self.cfg.image_size
        layers = self.cfg.decoder.num_layers if use_layers is None else use_layers
        tokens, k = token_count(s, s), self.cfg.decoder.num_queries
        return (backbone_flops(self.cfg.backbone, s, s) + encoder_flops(self.cfg.encoder, s, s, self.deployed)
                + head_flops(self.cfg.encoder.embed_dim, self.cfg.num_classes, tokens, k)
                + decoder_flops(self.cfg.decoder, tokens, k, layers))


def postprocess(logits: np.ndarray, boxes: np.ndarray, score_thr: float = 0.0,
                top_k: int | None = None) -> list[Detection]:
    """NMS-free decoding of one image: best (query, class) pairs above ``score_thr``.

    ``logits`` is [Q, C]; ``boxes`` is [Q, 4] cxcywh. Scores are per-class
    sigmoids; the top ``top_k`` (default Q) pairs are kept by descending
    score, ties by lower flat index.
    """
    q, c = logits.shape
    probs = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    flat = probs.reshape(-1)
    order = score_order(flat)[: (q if top_k is None else top_k)]
    order = order[flat[order] >= score_thr]
    xyxy = np.clip(cxcywh_to_xyxy(np.asarray(boxes, dtype=np.float64)), 0.0, 1.0)
    return [Detection(tuple(float(v) for v in xyxy[i // c]), int(i % c), float(flat[i])) for i in order]


def predict(model: RTDETR, images: np.ndarray, score_thr: float = 0.0, use_layers: int | None = None,
            batch_size: int = 16) -> list[list[Detection]]:
    """Eval-mode detections for a stack of images [N, 3, H, W]."""
    from .autodiff import no_grad

    was_training = model.training
    model.eval()
    out: list[list[Detection]] = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                res = model(images[start:start + batch_size], use_layers=use_layers)
                for lg, bx in zip(res.final.logits.data, res.final.boxes.data):
                    out.append(postprocess(lg, bx, score_thr))
    finally:
        model.train(was_training)
    return out


def model_config_from(image_size: int = 96, embed_dim: int = 128, num_queries: int = 100, num_layers: int = 3,
                      variant: str = "E", **overrides) -> ModelConfig:
    base = ModelConfig()
    enc = replace(base.encoder, variant=variant, embed_dim=embed_dim, ffn_dim=4 * embed_dim)
    dec = replace(base.decoder, num_queries=num_queries, num_layers=num_layers, embed_dim=embed_dim,
                  ffn_dim=4 * embed_dim)
    cfg = replace(base, image_size=image_size, encoder=enc, decoder=dec)
    return replace(cfg, **overrides) if overrides else cfg
