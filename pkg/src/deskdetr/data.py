"""Deterministic synthetic shape scenes and training-time augmentation.

Scenes hold 1 to 8 non-overlapping circles, squares and triangles on a flat
background. Pixels are stored as uint8 so the dataset stays compact; boxes
are normalized xyxy and always tightly bound the rendered shape pixels.

Randomness comes from a xorshift64* stream (shifts 12/25/27, multiplier
0x2545F4914F6CDD1D) whose state is seeded through splitmix64, so streams are
reproducible on any platform.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrityError
from .geometry import iou, xyxy_to_cxcywh

CLASS_NAMES = ("circle", "square", "triangle")
NUM_CLASSES = len(CLASS_NAMES)
MAX_OBJECTS = 8
MIN_SIDE_PX = 4
FILL_VALUE = 128

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* generator; ``seed`` may be any tuple of ints."""

    def __init__(self, *seed: int):
        state = 0x243F6A8885A308D3
        for s in seed:
            state = splitmix64(state ^ (int(s) & _MASK64))
        self.state = state or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, lo: int, hi: int) -> int:
        """Uniform int in [lo, hi)."""
        if hi <= lo:
            raise ConfigError(f"empty range [{lo}, {hi})")
        return lo + (self.next_u64() % (hi - lo))

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def numpy_seed(self) -> int:
        return self.next_u64() >> 32


@dataclass
class SyntheticScene:
    pixels: np.ndarray  # uint8 [3, H, W]
    labels: np.ndarray  # int64 [G]
    boxes: np.ndarray  # float64 [G, 4] normalized xyxy
    instances: np.ndarray = field(repr=False)  # int16 [H, W]; k + 1 marks object k, 0 background

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float32) * np.float32(1.0 / 255.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def gts(self) -> list[tuple[str, tuple[float, float, float, float]]]:
        return [(CLASS_NAMES[int(l)], tuple(float(v) for v in b)) for l, b in zip(self.labels, self.boxes)]


def _check_extent(height: int, width: int) -> None:
    if height <= 0 or width <= 0 or height % 32 or width % 32:
        raise ConfigError(f"image extent {height}x{width} must be positive multiples of 32")


def _shape_mask(kind: int, x0: int, y0: int, size: int, height: int, width: int) -> np.ndarray:
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    if kind == 0:
        r = size / 2.0
        return (xs - (x0 + r)) ** 2 + (ys - (y0 + r)) ** 2 <= r * r
    inside = (xs >= x0) & (xs < x0 + size) & (ys >= y0) & (ys < y0 + size)
    if kind == 1:
        return inside
    # upward triangle: apex at top center, base along the bottom edge
    rel_y = (ys - y0) / size
    half = 0.5 * rel_y * size
    cx = x0 + 0.5 * size
    return inside & (np.abs(xs - cx) <= half)


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Pixel-scan bounding box (x1, y1, x2, y2) in pixel edges, or None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _contrasting_color(rng: XorShift64Star, background: np.ndarray) -> np.ndarray:
    while True:
        color = np.array([rng.integers(0, 256) for _ in range(3)], dtype=np.int64)
        if np.max(np.abs(color - background)) >= 0.3 * 255:
            return color


def generate_one(seed: int, index: int, height: int = 96, width: int = 96) -> SyntheticScene:
    """Scene ``index`` of the stream ``seed``; pure in (seed, index)."""
    _check_extent(height, width)
    rng = XorShift64Star(seed, index)
    background = np.array([rng.integers(0, 256) for _ in range(3)], dtype=np.int64)
    pixels = np.broadcast_to(background[:, None, None], (3, height, width)).astype(np.uint8)
    instances = np.zeros((height, width), dtype=np.int16)
    want = rng.integers(1, MAX_OBJECTS + 1)
    labels, boxes, placed = [], [], []
    max_size = max(8, min(32, min(height, width) // 2))
    for _ in range(want * 20):
        if len(labels) == want:
            break
        kind = rng.integers(0, NUM_CLASSES)
        size = rng.integers(8, max_size + 1)
        x0 = rng.integers(0, width - size + 1)
        y0 = rng.integers(0, height - size + 1)
        # one pixel of clearance keeps shapes and their boxes apart
        if any(x0 < bx1 + 1 and bx0 < x0 + size + 1 and y0 < by1 + 1 and by0 < y0 + size + 1
               for bx0, by0, bx1, by1 in placed):
            continue
        mask = _shape_mask(kind, x0, y0, size, height, width)
        box = mask_box(mask)
        if box is None or box[2] - box[0] < MIN_SIDE_PX or box[3] - box[1] < MIN_SIDE_PX:
            continue
        color = _contrasting_color(rng, background)
        pixels[:, mask] = color[:, None].astype(np.uint8)
        instances[mask] = len(labels) + 1
        placed.append((x0, y0, x0 + size, y0 + size))
        labels.append(kind)
        boxes.append([box[0] / width, box[1] / height, box[2] / width, box[3] / height])
    return SyntheticScene(pixels, np.array(labels, dtype=np.int64),
                          np.array(boxes, dtype=np.float64).reshape(-1, 4), instances)


def generate(seed: int, count: int, height: int = 96, width: int = 96, start: int = 0) -> list[SyntheticScene]:
    _check_extent(height, width)
    if count < 0:
        raise ConfigError(f"count must be nonnegative, got {count}")
    return [generate_one(seed, start + i, height, width) for i in range(count)]


HELDOUT_SEED_OFFSET = 1_000_003


def heldout_split(seed: int, count: int = 500, height: int = 96, width: int = 96) -> list[SyntheticScene]:
    """Evaluation scenes drawn from a seed-offset stream disjoint from training."""
    return generate(seed + HELDOUT_SEED_OFFSET, count, height, width)


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class _Affine1D:
    """Per-axis map from output to source coordinates, src = a * dst + b (normalized)."""

    a: float = 1.0
    b: float = 0.0

    def then(self, inner: "_Affine1D") -> "_Affine1D":
        # self is applied first to the image, inner afterwards: src = self(inner(dst))
        return _Affine1D(self.a * inner.a, self.a * inner.b + self.b)

    def forward(self, src: np.ndarray) -> np.ndarray:
        return (src - self.b) / self.a


def _resample(arr: np.ndarray, mx: _Affine1D, my: _Affine1D, fill) -> np.ndarray:
    """Nearest-neighbor warp of [..., H, W] through output-to-source maps."""
    h, w = arr.shape[-2:]
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    sx = np.floor((mx.a * u + mx.b) * w + 1e-9).astype(np.int64)
    sy = np.floor((my.a * v + my.b) * h + 1e-9).astype(np.int64)
    vx = (sx >= 0) & (sx < w)
    vy = (sy >= 0) & (sy < h)
    out = arr[..., np.clip(sy, 0, h - 1)[:, None], np.clip(sx, 0, w - 1)[None, :]]
    valid = vy[:, None] & vx[None, :]
    if arr.ndim == 3:
        return np.where(valid[None], out, np.asarray(fill, dtype=arr.dtype)[:, None, None])
    return np.where(valid, out, np.asarray(fill, dtype=arr.dtype))


AUGMENTATIONS = ("flip", "color", "expand_crop", "resize")


def augment(scene: SyntheticScene, seed: int, force: dict[str, bool] | None = None,
            min_visible: float = 0.5, min_iou: float = 0.7) -> SyntheticScene:
    """Random flip, color jitter, expand-and-crop and resize-with-letterbox.

    Each transform fires with probability 0.5 unless ``force`` pins it on or
    off. Geometric transforms compose into one nearest-neighbor warp of the
    pixels and the instance map, so box and mask stay consistent. A GT is
    dropped when less than ``min_visible`` of its box survives the crop, when
    its visible pixels fall below the minimum side, or when the warped box
    overlaps the visible mask box with IoU below ``min_iou``.
    """
    force = force or {}
    unknown = set(force) - set(AUGMENTATIONS)
    if unknown:
        raise ConfigError(f"unknown augmentations: {sorted(unknown)}")
    rng = XorShift64Star(seed, 0xA11CE)
    fire = {name: (force[name] if name in force else rng.bernoulli(0.5)) for name in AUGMENTATIONS}
    mx, my = _Affine1D(), _Affine1D()
    if fire["flip"]:
        mx = mx.then(_Affine1D(-1.0, 1.0))
    if fire["expand_crop"]:
        r = rng.uniform(1.0, 2.0)
        ox, oy = rng.uniform(0.0, 1.0 - 1.0 / r), rng.uniform(0.0, 1.0 - 1.0 / r)
        c = rng.uniform(0.6, 1.0)
        cx0, cy0 = rng.uniform(0.0, 1.0 - c), rng.uniform(0.0, 1.0 - c)
        mx = mx.then(_Affine1D(c * r, (cx0 - ox) * r))
        my = my.then(_Affine1D(c * r, (cy0 - oy) * r))
    if fire["resize"]:
        sx, sy = rng.uniform(0.75, 1.25), rng.uniform(0.75, 1.25)
        fit = 1.0 / max(sx, sy)
        ex, ey = sx * fit, sy * fit
        mx = mx.then(_Affine1D(1.0 / ex, -(1.0 - ex) / 2.0 / ex))
        my = my.then(_Affine1D(1.0 / ey, -(1.0 - ey) / 2.0 / ey))
    pixels = scene.pixels
    instances = scene.instances
    boxes = scene.boxes.copy()
    labels = scene.labels.copy()
    if (mx.a, mx.b, my.a, my.b) != (1.0, 0.0, 1.0, 0.0):
        pixels = _resample(pixels, mx, my, [FILL_VALUE] * 3)
        instances = _resample(instances, mx, my, 0)
        boxes, labels, instances = _warp_boxes(boxes, labels, instances, mx, my, min_visible, min_iou)
    if fire["color"]:
        shift = np.array([rng.uniform(-0.2, 0.2) for _ in range(3)]) * 255.0
        pixels = np.clip(np.rint(pixels.astype(np.float64) + shift[:, None, None]), 0, 255).astype(np.uint8)
    return SyntheticScene(np.ascontiguousarray(pixels), labels, boxes, instances)


def _warp_boxes(boxes, labels, instances, mx, my, min_visible, min_iou):
    h, w = instances.shape
    keep_boxes, keep_labels = [], []
    new_instances = np.zeros_like(instances)
    for k in range(len(labels)):
        x = np.sort(mx.forward(boxes[k, [0, 2]]))
        y = np.sort(my.forward(boxes[k, [1, 3]]))
        full = (x[1] - x[0]) * (y[1] - y[0])
        clipped = np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0)
        vis = (clipped[0][1] - clipped[0][0]) * (clipped[1][1] - clipped[1][0])
        mask = instances == k + 1
        pix = mask_box(mask)
        if full <= 0 or vis / full < min_visible or pix is None:
            continue
        if pix[2] - pix[0] < MIN_SIDE_PX or pix[3] - pix[1] < MIN_SIDE_PX:
            continue
        mask_xyxy = np.array([pix[0] / w, pix[1] / h, pix[2] / w, pix[3] / h])
        warped = np.array([clipped[0][0], clipped[1][0], clipped[0][1], clipped[1][1]])
        if iou(warped, mask_xyxy) < min_iou:
            continue
        # nearest resampling moves edges by under a pixel; the mask box stays tight
        keep_boxes.append(mask_xyxy)
        keep_labels.append(labels[k])
        new_instances[mask] = len(keep_labels)
    return (np.array(keep_boxes, dtype=np.float64).reshape(-1, 4),
            np.array(keep_labels, dtype=np.int64), new_instances)


# -- batching and dumps ------------------------------------------------------

class SceneBank:
    """Scenes packed into contiguous arrays for fast batch assembly."""

    def __init__(self, scenes: list[SyntheticScene]):
        if not scenes:
            raise ConfigError("dataset must be nonempty")
        self.scenes = scenes
        self.pixels = np.stack([s.pixels for s in scenes])

    def __len__(self) -> int:
        return len(self.scenes)

    def batch(self, indices, augment_seed: int | None = None):
        """Images [B, 3, H, W] float32 plus per-image labels and cxcywh boxes."""
        scenes = [self.scenes[int(i)] for i in indices]
        if augment_seed is not None:
            scenes = [augment(s, augment_seed * 1_000_003 + int(i)) for s, i in zip(scenes, indices)]
            pixels = np.stack([s.pixels for s in scenes])
        else:
            pixels = self.pixels[np.asarray(indices, dtype=np.int64)]
        images = pixels.astype(np.float32) * np.float32(1.0 / 255.0)
        return images, [s.labels for s in scenes], [xyxy_to_cxcywh(s.boxes) for s in scenes]


def dump(scenes: list[SyntheticScene], directory: str | os.PathLike) -> str:
    """Write binary PPM images and one ``annotations.json``; returns its path."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:05d}.ppm"
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(f"P6\n{s.width} {s.height}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(s.pixels.transpose(1, 2, 0)).tobytes())
        records.append({"file": name, "gts": [
            {"label": CLASS_NAMES[int(l)], "x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3])}
            for l, b in zip(s.labels, s.boxes)]})
    path = os.path.join(directory, "annotations.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
    return path


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """uint8 [3, H, W] from a binary P6 file written by :func:`dump`."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        m = re.compile(rb"\s*(\S+)").match(data, pos)
        if m is None:
            raise IntegrityError(f"{path}: truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise IntegrityError(f"{path}: not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    body = data[pos + 1:]
    if maxval != 255 or len(body) != 3 * w * h:
        raise IntegrityError(f"{path}: unexpected PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()
