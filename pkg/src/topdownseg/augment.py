"""Seeded training-time augmentation for image / response-map pairs.

Sampling and application are split: one draw produces an Augmentation
record, and separate appliers transform the image and its response
stack from that record. The geometric half (crop box, flip) must hit
both streams identically or the supervision detaches from the pixels;
the photometric half (jitter, grayscale, blur) touches only the image.
Every parameter is drawn from a caller-supplied numpy generator, in a
fixed order irrespective of which transforms end up active, so a seed
fully determines the augmentation stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from topdownseg.imutil import resize_bilinear
from topdownseg.pseudolabels import roi_align_label

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Augmentation:
    """One sampled transform; integer crop box in image pixel coords."""

    box: tuple[int, int, int, int]
    flip: bool
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    grayscale: bool = False
    blur_sigma: float | None = None


def sample_crop_box(
    rng: np.random.Generator,
    image_hw: tuple[int, int],
    scale: tuple[float, float] = (0.3, 1.0),
    ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
    attempts: int = 10,
) -> tuple[int, int, int, int]:
    """Random resized crop box: area and aspect drawn, origin uniform.

    Falls back to the largest centered box at the last drawn aspect when
    no attempt fits, so the result is always a valid non-empty box.
    """
    height, width = image_hw
    area = height * width
    aspect = 1.0
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            return (x0, y0, x0 + w, y0 + h)
    w = min(width, int(round(height * aspect)))
    w = max(1, w)
    h = max(1, min(height, int(round(w / aspect))))
    x0 = (width - w) // 2
    y0 = (height - h) // 2
    return (x0, y0, x0 + w, y0 + h)


def sample_augmentation(
    rng: np.random.Generator,
    image_hw: tuple[int, int],
    jitter: float = 0.4,
    flip_prob: float = 0.5,
    grayscale_prob: float = 0.2,
    blur_prob: float = 0.5,
) -> Augmentation:
    """Draw one augmentation. All variates are consumed on every call so
    the generator advances identically whatever gets activated."""
    box = sample_crop_box(rng, image_hw)
    flip = bool(rng.random() < flip_prob)
    brightness = float(rng.uniform(1.0 - jitter, 1.0 + jitter))
    contrast = float(rng.uniform(1.0 - jitter, 1.0 + jitter))
    saturation = float(rng.uniform(1.0 - jitter, 1.0 + jitter))
    grayscale = bool(rng.random() < grayscale_prob)
    blur_draw = rng.random()
    sigma = float(rng.uniform(0.1, 2.0))
    return Augmentation(
        box=box,
        flip=flip,
        brightness=brightness,
        contrast=contrast,
        saturation=saturation,
        grayscale=grayscale,
        blur_sigma=sigma if blur_draw < blur_prob else None,
    )


def apply_to_image(
    image: np.ndarray, aug: Augmentation, out_hw: tuple[int, int]
) -> np.ndarray:
    """Crop, resize, flip, then photometric ops; output stays in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    x0, y0, x1, y1 = aug.box
    if not (0 <= x0 < x1 <= arr.shape[1] and 0 <= y0 < y1 <= arr.shape[0]):
        raise ValueError(f"crop box {aug.box} outside image {arr.shape[:2]}")
    out = resize_bilinear(arr[y0:y1, x0:x1], out_hw)
    if aug.flip:
        out = out[:, ::-1]
    # Factor-1 jitter must leave pixels untouched bit for bit, so each
    # op is skipped at its neutral value instead of round-tripping.
    if aug.brightness != 1.0:
        out = out * aug.brightness
    if aug.contrast != 1.0:
        mean = float((out @ _LUMA).mean())
        out = (out - mean) * aug.contrast + mean
    if aug.saturation != 1.0:
        luma = (out @ _LUMA)[:, :, None]
        out = luma + (out - luma) * aug.saturation
    if aug.grayscale:
        out = np.repeat((out @ _LUMA)[:, :, None], 3, axis=2)
    if aug.blur_sigma is not None:
        out = np.stack(
            [gaussian_filter(out[:, :, c], aug.blur_sigma) for c in range(3)],
            axis=2,
        )
    return np.clip(out, 0.0, 1.0)


def apply_to_responses(
    stack: np.ndarray,
    aug: Augmentation,
    image_hw: tuple[int, int],
    target_hw: tuple[int, int],
) -> np.ndarray:
    """Crop the (C, h, w) response stack to the box's feature-space
    footprint and mirror it when the image was flipped."""
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected (C, h, w) stack, got {arr.shape}")
    height, width = image_hw
    h, w = arr.shape[1:]
    x0, y0, x1, y1 = aug.box
    feature_box = (
        x0 * w / width,
        y0 * h / height,
        x1 * w / width,
        y1 * h / height,
    )
    out = roi_align_label(arr, feature_box, target_hw)
    if aug.flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)
