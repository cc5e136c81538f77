"""Hybrid encoder: intra-scale attention on the coarsest map plus CNN fusion.

Six variants share one skeleton so their cost can be compared on equal
footing:

====  ==========================================  =====================
tag   intra-scale interaction                     cross-scale fusion
====  ==========================================  =====================
A     none                                        none
B     one shared transformer applied per level    none (tokens concat)
C     one transformer over all levels' tokens     none
D     one shared transformer applied per level    PANet, simple blocks
D_S5  transformer on S5 only                      PANet, simple blocks
E     transformer on S5 only (AIFI)               PANet, RepConv blocks
====  ==========================================  =====================
"""

from __future__ import annotations

import csv
import functools
import os
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, MultiheadAttention, Tensor
from .autodiff import functional as F
from .backbone import DOWN_PAD, ConvNormAct
from .errors import ConfigError, ContractError, StorageError

VARIANTS = ("A", "B", "C", "D", "D_S5", "E")


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "E"
    embed_dim: int = 256
    nheads: int = 8
    ffn_dim: int = 1024
    aifi_layers: int = 1
    repblocks: int = 3
    width_mult: float = 1.0  # fusion-block hidden width as a fraction of embed_dim
    in_channels: tuple[int, int, int] = (64, 128, 256)
    temperature: float = 10000.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}; expected one of {VARIANTS}")
        if self.embed_dim <= 0 or self.embed_dim % self.nheads:
            raise ConfigError(f"embed_dim {self.embed_dim} must be a positive multiple of nheads {self.nheads}")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 for the 2D sine embedding")
        if not 0.0 < self.width_mult <= 1.0:
            raise ConfigError(f"width_mult must lie in (0, 1], got {self.width_mult}")
        if self.repblocks < 0 or self.aifi_layers < 1 or self.ffn_dim <= 0:
            raise ConfigError("repblocks must be >= 0, aifi_layers >= 1 and ffn_dim > 0")

    @property
    def hidden_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.width_mult)))

    @property
    def intra(self) -> str:
        return {"A": "none", "B": "levels", "C": "cross", "D": "levels", "D_S5": "s5", "E": "s5"}[self.variant]

    @property
    def fusion(self) -> str:
        return {"A": "none", "B": "none", "C": "none", "D": "simple", "D_S5": "simple", "E": "ccff"}[self.variant]


# -- positional embedding ----------------------------------------------------

@functools.lru_cache(maxsize=64)
def sincos_embedding(h: int, w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """[h*w, dim] 2D sine embedding, row-major tokens, half the dims per axis."""
    if dim % 4:
        raise ConfigError("embedding dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / temperature ** (np.arange(quarter, dtype=np.float64) / quarter)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ox = gx.reshape(-1)[:, None] * omega[None]
    oy = gy.reshape(-1)[:, None] * omega[None]
    emb = np.concatenate([np.sin(ox), np.cos(ox), np.sin(oy), np.cos(oy)], axis=1)
    emb.setflags(write=False)
    return emb


def flatten_tokens(x: Tensor) -> Tensor:
    """[N, C, h, w] -> [N, h*w, C]."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def restore_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    """[N, h*w, C] -> [N, C, h, w]."""
    n, _, c = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(n, c, h, w)


# -- building blocks ---------------------------------------------------------

class EncoderLayer(Module):
    """Pre-norm transformer encoder layer; positions are added to queries and keys."""

    def __init__(self, dim: int, nheads: int, ffn_dim: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiheadAttention(dim, nheads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, ffn_dim, rng)
        self.fc2 = Linear(ffn_dim, dim, rng)

    def forward(self, x: Tensor, pos: np.ndarray) -> Tensor:
        h = self.norm1(x)
        q = h + pos.astype(h.dtype)
        x = x + self.attn(q, q, h)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class IntraScaleTransformer(Module):
    """Flatten a map, run encoder layers with sine positions, restore its shape."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg.embed_dim, cfg.nheads, cfg.ffn_dim, rng) for _ in range(cfg.aifi_layers)]

    def run_tokens(self, tokens: Tensor, pos: np.ndarray) -> Tensor:
        for layer in self.layers:
            tokens = layer(tokens, pos)
        return tokens

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        pos = sincos_embedding(h, w, self.cfg.embed_dim, self.cfg.temperature)
        return restore_tokens(self.run_tokens(flatten_tokens(x), pos), h, w)


class RepConv(Module):
    """3x3 conv+norm, 1x1 conv+norm and optional identity norm, summed then activated.

    :meth:`reparameterize` folds every branch into one biased 3x3 conv that
    reproduces the eval-mode output.
    """

    def __init__(self, ch: int, rng: np.random.Generator, identity: bool = False, act: str | None = "silu"):
        super().__init__()
        self.ch = ch
        self.act = act
        self.conv3 = ConvNormAct(ch, ch, 3, rng, act=None)
        self.conv1 = ConvNormAct(ch, ch, 1, rng, act=None)
        self.identity = BatchNorm2d(ch) if identity else None
        self.deploy_conv: Conv2d | None = None

    @property
    def deployed(self) -> bool:
        return self.deploy_conv is not None

    def forward(self, x: Tensor) -> Tensor:
        if self.deploy_conv is not None:
            y = self.deploy_conv(x)
        else:
            y = self.conv3(x) + self.conv1(x)
            if self.identity is not None:
                y = y + self.identity(x)
        return F.activation(y, self.act) if self.act else y

    @staticmethod
    def _fold(kernel: np.ndarray, norm: BatchNorm2d) -> tuple[np.ndarray, np.ndarray]:
        k = kernel.astype(np.float64)
        std = np.sqrt(norm.running_var.astype(np.float64) + norm.eps)
        scale = norm.gain.data.astype(np.float64) / std
        return k * scale[:, None, None, None], norm.bias.data - norm.running_mean * scale

    def fused_kernel(self) -> tuple[np.ndarray, np.ndarray]:
        if self.deploy_conv is not None:
            return self.deploy_conv.weight.data.copy(), self.deploy_conv.bias.data.copy()
        k3, b3 = self._fold(self.conv3.conv.weight.data, self.conv3.norm)
        k1, b1 = self._fold(self.conv1.conv.weight.data, self.conv1.norm)
        kernel = k3.copy()
        kernel[:, :, 1:2, 1:2] += k1
        bias = b3 + b1
        if self.identity is not None:
            eye = np.zeros((self.ch, self.ch, 3, 3))
            eye[np.arange(self.ch), np.arange(self.ch), 1, 1] = 1.0
            ki, bi = self._fold(eye, self.identity)
            kernel += ki
            bias = bias + bi
        return kernel, bias

    def reparameterize(self) -> None:
        if self.deploy_conv is not None:
            return
        kernel, bias = self.fused_kernel()
        dtype = self.conv3.conv.weight.data.dtype
        conv = Conv2d(self.ch, self.ch, 3, np.random.default_rng(0), bias=True)
        conv.weight.data = kernel.astype(dtype)
        conv.bias.data = np.asarray(bias).astype(dtype)
        conv.train(self.training)
        self.deploy_conv = conv
        self.conv3 = self.conv1 = self.identity = None


def _check_spatial(high: Tensor, low: Tensor) -> None:
    if high.shape[-2:] != low.shape[-2:]:
        raise ContractError(f"fusion inputs differ spatially: {high.shape} vs {low.shape}")


class FusionBlock(Module):
    """Concat, two 1x1 conv paths, RepConv stack on one path, element-wise add."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int, repblocks: int, rng: np.random.Generator,
                 rep_act: str | None = "silu"):
        super().__init__()
        self.conv1 = ConvNormAct(in_ch, hidden, 1, rng)
        self.conv2 = ConvNormAct(in_ch, hidden, 1, rng)
        self.blocks = [RepConv(hidden, rng, act=rep_act) for _ in range(repblocks)]
        self.conv3 = ConvNormAct(hidden, out_ch, 1, rng) if hidden != out_ch else None

    def forward(self, high: Tensor, low: Tensor) -> Tensor:
        _check_spatial(high, low)
        x = F.concat([high, low], axis=1)
        a = self.conv1(x)
        for block in self.blocks:
            a = block(a)
        y = a + self.conv2(x)
        return self.conv3(y) if self.conv3 is not None else y


class SimpleFusion(Module):
    """Concat followed by a single 1x1 conv, norm and SiLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv = ConvNormAct(in_ch, out_ch, 1, rng)

    def forward(self, high: Tensor, low: Tensor) -> Tensor:
        _check_spatial(high, low)
        return self.conv(F.concat([high, low], axis=1))


class PANet(Module):
    """Top-down then bottom-up path over three maps; every merge is a fusion block."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim

        def block():
            if cfg.fusion == "ccff":
                return FusionBlock(2 * d, d, cfg.hidden_dim, cfg.repblocks, rng)
            return SimpleFusion(2 * d, d, rng)

        self.lateral = [ConvNormAct(d, d, 1, rng) for _ in range(2)]
        self.fpn_blocks = [block() for _ in range(2)]
        self.downsample = [ConvNormAct(d, d, 3, rng, stride=2, padding=DOWN_PAD) for _ in range(2)]
        self.pan_blocks = [block() for _ in range(2)]

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        inner = [feats[-1]]
        for idx in range(len(feats) - 1, 0, -1):
            high = self.lateral[len(feats) - 1 - idx](inner[0])
            inner[0] = high
            low = feats[idx - 1]
            inner.insert(0, self.fpn_blocks[len(feats) - 1 - idx](F.upsample_nearest2x(high), low))
        outs = [inner[0]]
        for idx in range(len(feats) - 1):
            down = self.downsample[idx](outs[-1])
            outs.append(self.pan_blocks[idx](down, inner[idx + 1]))
        return outs


class HybridEncoder(Module):
    """Projects S3/S4/S5 to ``embed_dim`` and applies the configured variant."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.proj = [ConvNormAct(c, cfg.embed_dim, 1, rng, act=None) for c in cfg.in_channels]
        self.transformer = IntraScaleTransformer(cfg, rng) if cfg.intra != "none" else None
        self.panet = PANet(cfg, rng) if cfg.fusion != "none" else None

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        if len(feats) != 3:
            raise ContractError(f"expected 3 pyramid levels, got {len(feats)}")
        for a, b in zip(feats[:-1], feats[1:]):
            if a.shape[-2] != 2 * b.shape[-2] or a.shape[-1] != 2 * b.shape[-1]:
                raise ContractError(f"pyramid extents must halve: {a.shape} then {b.shape}")
        x = [p(f) for p, f in zip(self.proj, feats)]
        intra = self.cfg.intra
        if intra == "levels":
            x = [self.transformer(f) for f in x]
        elif intra == "s5":
            x[-1] = self.transformer(x[-1])
        elif intra == "cross":
            x = self._cross_scale(x)
        if self.panet is not None:
            x = self.panet(x)
        return x

    def _cross_scale(self, x: list[Tensor]) -> list[Tensor]:
        shapes = [f.shape[-2:] for f in x]
        tokens = F.concat([flatten_tokens(f) for f in x], axis=1)
        pos = np.concatenate([sincos_embedding(h, w, self.cfg.embed_dim, self.cfg.temperature) for h, w in shapes])
        out = self.transformer.run_tokens(tokens, pos)
        sizes = [h * w for h, w in shapes]
        return [restore_tokens(t, h, w) for t, (h, w) in zip(F.split(out, sizes, axis=1), shapes)]

    def reparameterize(self) -> int:
        """Fold every RepConv into deploy form; returns how many were folded."""
        count = 0
        for m in self.modules():
            if isinstance(m, RepConv) and not m.deployed:
                m.reparameterize()
                count += 1
        return count


def build_encoder_variant(cfg: EncoderConfig, rng: np.random.Generator | None = None) -> HybridEncoder:
    return HybridEncoder(cfg, rng if rng is not None else np.random.default_rng(0))


# -- analytic cost -----------------------------------------------------------

def _transformer_flops(tokens: int, cfg: EncoderConfig) -> int:
    d, f = cfg.embed_dim, cfg.ffn_dim
    per_layer = 2 * tokens * d * d * 4 + 2 * 2 * tokens * tokens * d + 2 * 2 * tokens * d * f
    return per_layer * cfg.aifi_layers


def _fusion_flops(hw: int, cfg: EncoderConfig, deploy: bool) -> int:
    d, hid = cfg.embed_dim, cfg.hidden_dim
    if cfg.fusion == "simple":
        return 2 * hw * 2 * d * d
    rep = 2 * hw * hid * hid * (9 if deploy else 10)
    total = 2 * (2 * hw * 2 * d * hid) + cfg.repblocks * rep
    if hid != d:
        total += 2 * hw * hid * d
    return total


def encoder_flops(cfg: EncoderConfig, height: int, width: int, deploy: bool = True) -> int:
    """Multiply-add FLOPs of the encoder on one image (2 per MAC).

    Counts convolutions, linear maps and the two attention matmuls; norms,
    activations and softmax are ignored. ``deploy`` counts RepConv units in
    their folded single-kernel form.
    """
    if height % 32 or width % 32:
        raise ConfigError(f"input extent {height}x{width} is not divisible by 32")
    d = cfg.embed_dim
    sizes = [(height // s, width // s) for s in (8, 16, 32)]
    hws = [h * w for h, w in sizes]
    total = sum(2 * hw * c * d for hw, c in zip(hws, cfg.in_channels))
    if cfg.intra == "levels":
        total += sum(_transformer_flops(hw, cfg) for hw in hws)
    elif cfg.intra == "s5":
        total += _transformer_flops(hws[2], cfg)
    elif cfg.intra == "cross":
        total += _transformer_flops(sum(hws), cfg)
    if cfg.fusion != "none":
        total += 2 * hws[2] * d * d + 2 * hws[1] * d * d  # lateral 1x1 convs
        total += _fusion_flops(hws[1], cfg, deploy) + _fusion_flops(hws[0], cfg, deploy)
        total += 2 * hws[1] * d * d * 9 + 2 * hws[2] * d * d * 9  # stride-2 downsampling
        total += _fusion_flops(hws[1], cfg, deploy) + _fusion_flops(hws[2], cfg, deploy)
    return int(total)


@dataclass
class VariantCost:
    variant: str
    params: int
    flops: int


def variant_costs(base: EncoderConfig, height: int, width: int, build: bool = True) -> list[VariantCost]:
    rows = []
    for tag in VARIANTS:
        cfg = replace(base, variant=tag)
        params = build_encoder_variant(cfg).num_parameters() if build else 0
        rows.append(VariantCost(tag, params, encoder_flops(cfg, height, width)))
    return rows


def write_variant_csv(rows: list[VariantCost], path: str | os.PathLike) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "params", "flops"])
            for r in rows:
                writer.writerow([r.variant, r.params, r.flops])
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
