"""Synthetic shapes segmentation data.

Class 0 is background; classes 1..K-1 are distinct shape kinds painted in
random colours on a noisy background. Sample ``i`` depends only on
``(seed, i)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import stream

IGNORE_LABEL = 255
SHAPE_KINDS = ("rectangle", "circle", "triangle", "diamond", "ring", "cross")
MIN_SIZE = 16
# shape radius as a fraction of the image side
RADIUS_RANGE = (0.12, 0.25)
PLACEMENT_TRIES = 30


@dataclass
class SegSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], multiples of 1/255
    label: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.image.shape[:2] != self.label.shape:
            raise ValueError(f"image {self.image.shape[:2]} and label {self.label.shape} extents differ")


def _mask(kind: str, yy, xx, cy, cx, r, rng) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "rectangle":
        ry, rx = r * rng.uniform(0.5, 1.0), r * rng.uniform(0.5, 1.0)
        return (np.abs(dy) <= ry) & (np.abs(dx) <= rx)
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        # upright isosceles: apex at top, base at the bottom
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        arm = max(1.5, 0.3 * r)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ValueError(kind)


def _grow(m: np.ndarray) -> np.ndarray:
    """Mask dilated by one pixel (4-neighbourhood), so placed shapes never touch."""
    g = m.copy()
    g[1:] |= m[:-1]
    g[:-1] |= m[1:]
    g[:, 1:] |= m[:, :-1]
    g[:, :-1] |= m[:, 1:]
    return g


def make_sample(seed: int, index: int, num_classes: int, size: int) -> SegSample:
    rng = stream(seed, "dataset", index)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = rng.uniform(0.0, 1.0, 3)
    grad = rng.uniform(-0.15, 0.15, 3)
    img = bg + grad * (yy / size)[..., None]
    label = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)
    classes = rng.permutation(np.arange(1, num_classes))
    present = rng.random(len(classes)) < 0.85
    for cls, keep in zip(classes, present):
        r = rng.uniform(*RADIUS_RANGE) * size
        colour = rng.uniform(0.0, 1.0, 3)
        while np.abs(colour - bg).max() < 0.3:
            colour = rng.uniform(0.0, 1.0, 3)
        # rejection-sample a position clear of earlier shapes; the class is left out if none is clear
        clear = False
        for _ in range(PLACEMENT_TRIES):
            cy, cx = rng.uniform(r, size - r, 2)
            m = _mask(SHAPE_KINDS[cls - 1], yy, xx, cy, cx, r, rng)
            if not (m & occupied).any():
                clear = True
                break
        if keep and clear:
            occupied |= _grow(m)
            img[m] = colour
            label[m] = cls
    img = img + rng.normal(0.0, 0.04, img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255) / 255
    return SegSample(img.astype(np.float32), label)


def gen_shapes_dataset(n_samples: int, num_classes: int, size: int, seed: int) -> list[SegSample]:
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if num_classes - 1 > len(SHAPE_KINDS):
        raise ValueError(f"at most {len(SHAPE_KINDS) + 1} classes are supported, got {num_classes}")
    if size < MIN_SIZE:
        raise ValueError(f"size {size} is too small to place shapes (minimum {MIN_SIZE})")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    return [make_sample(seed, i, num_classes, size) for i in range(n_samples)]


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])
