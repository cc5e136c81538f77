"""Small convolutional backbone producing the stride 8/16/32 pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import BatchNorm2d, Conv2d, Module, Tensor
from .autodiff import functional as F
from .errors import ConfigError

# stride-2 3x3 convs pad one pixel after the data only, so even extents halve exactly
DOWN_PAD = (0, 1)


class ConvNormAct(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding=None, act: str | None = "silu"):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, k, rng, stride=stride, padding=padding, bias=False)
        self.norm = BatchNorm2d(out_ch)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return F.activation(y, self.act) if self.act else y


class ResidualBlock(Module):
    def __init__(self, ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = ConvNormAct(ch, ch, 3, rng)
        self.conv2 = ConvNormAct(ch, ch, 3, rng, act=None)

    def forward(self, x: Tensor) -> Tensor:
        return F.silu(x + self.conv2(self.conv1(x)))


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)

    def __post_init__(self):
        if len(self.widths) != 5 or min(self.widths) <= 0:
            raise ConfigError(f"backbone needs 5 positive stage widths, got {self.widths}")

    @property
    def pyramid_channels(self) -> tuple[int, int, int]:
        return tuple(self.widths[2:])


class TinyBackbone(Module):
    """Five stride-2 stages, each followed by one residual block; stages 3 to 5 are tapped."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch = 3
        for width in cfg.widths:
            stages.append(_Stage(in_ch, width, rng))
            in_ch = width
        self.stages = stages

    def forward(self, images) -> list[Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ConfigError(f"input extent {h}x{w} is not divisible by 32")
        taps = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 2:
                taps.append(x)
        return taps


class _Stage(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.down = ConvNormAct(in_ch, out_ch, 3, rng, stride=2, padding=DOWN_PAD)
        self.block = ResidualBlock(out_ch, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(self.down(x))


def backbone_flops(cfg: BackboneConfig, height: int, width: int) -> int:
    """Multiply-add FLOPs of one forward pass on a single image."""
    total, in_ch, h, w = 0, 3, height, width
    for out_ch in cfg.widths:
        h, w = h // 2, w // 2
        total += 2 * h * w * out_ch * in_ch * 9
        total += 2 * (2 * h * w * out_ch * out_ch * 9)
        in_ch = out_ch
    return total
