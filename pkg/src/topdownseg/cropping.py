"""Sliding-window crop mining and the binarized foreground prior."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from topdownseg.imutil import resize_bilinear, resize_nearest

logger = logging.getLogger(__name__)

FG = "fg"
BG = "bg"
NEUTRAL = "neutral"


@dataclass(frozen=True)
class CropRect:
    """Square window in image pixel coordinates.

    x is the column of the left edge, y the row of the top edge; the
    window spans [y, y + side) x [x, x + side) and must lie fully inside
    the image it was generated for. side = round(beta * min(H, W)).
    """

    x: int
    y: int
    side: int
    beta: float
    image_id: str | None = None


@dataclass(frozen=True)
class ForegroundPrior:
    """Binary attention prior at the encoder token grid."""

    grid: np.ndarray  # (h, w) uint8 in {0, 1}

    def at_resolution(self, image_hw: tuple[int, int]) -> np.ndarray:
        """Nearest-neighbor upsample to image resolution."""
        return resize_nearest(self.grid, image_hw).astype(np.uint8)


def binarize_attention(attn: np.ndarray) -> ForegroundPrior:
    """Threshold an attention grid at its own mean (strictly greater).

    A constant grid has no cell strictly above the mean and maps to all
    zeros; the min == max fast path keeps that exact even when a float
    mean would round below the constant.
    """
    grid = np.asarray(attn, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"expected non-empty (h, w) attention grid, got {grid.shape}")
    lo = grid.min()
    hi = grid.max()
    if lo == hi:
        return ForegroundPrior(np.zeros(grid.shape, dtype=np.uint8))
    mean = grid.mean()
    return ForegroundPrior((grid > mean).astype(np.uint8))


def generate_windows(
    image_hw: tuple[int, int], betas: Sequence[float]
) -> list[CropRect]:
    """Square sliding windows for each scale factor in ``betas``.

    Window side is round(beta * min(H, W)); the stride is half that
    (round(0.5 * beta * min(H, W))). Both axes walk the stride grid and
    append a flush-to-edge stop so the far border is always covered. A
    beta whose window does not fit inside the image is skipped with a
    warning instead of failing the whole call.
    """
    height, width = image_hw
    if height <= 0 or width <= 0:
        raise ValueError(f"image size must be positive, got {image_hw}")
    if not betas:
        raise ValueError("at least one beta is required")
    shorter = min(height, width)
    rects: list[CropRect] = []
    for beta in betas:
        if beta <= 0:
            raise ValueError(f"beta must be positive, got {beta}")
        side = int(round(beta * shorter))
        if side < 1 or side > height or side > width:
            logger.warning(
                "skipping beta %.3g: window side %d does not fit in %dx%d",
                beta, side, height, width,
            )
            continue
        stride = max(1, int(round(0.5 * beta * shorter)))
        ys = _axis_origins(height, side, stride)
        xs = _axis_origins(width, side, stride)
        for y in ys:
            for x in xs:
                rects.append(CropRect(x=x, y=y, side=side, beta=beta))
    return rects


def _axis_origins(size: int, side: int, stride: int) -> list[int]:
    origins = list(range(0, size - side + 1, stride))
    last = size - side
    if origins[-1] != last:
        origins.append(last)
    return origins


def classify_patch(rect: CropRect, prior_mask: np.ndarray) -> str:
    """Assign a crop the role fg, bg, or neutral against the binary prior.

    The prior must already be at image resolution. Fractions compare in
    integer arithmetic so the strict thresholds (> 1/2 on-pixels for fg,
    > 4/5 off-pixels for bg) are exact.
    """
    mask = np.asarray(prior_mask)
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) prior mask, got shape {mask.shape}")
    h, w = mask.shape
    if rect.x < 0 or rect.y < 0 or rect.x + rect.side > w or rect.y + rect.side > h:
        raise ValueError(f"crop {rect} exceeds prior of size {h}x{w}")
    window = mask[rect.y : rect.y + rect.side, rect.x : rect.x + rect.side]
    total = window.size
    ones = int(np.count_nonzero(window))
    zeros = total - ones
    if ones * 2 > total:
        return FG
    if zeros * 5 > total * 4:
        return BG
    return NEUTRAL


def crop_resize(
    image: np.ndarray, rect: CropRect, target_side: int | None = None
) -> np.ndarray:
    """Cut a square window and bilinearly resize it to target_side.

    Default target is half the shorter image side. When the rect covers
    the whole (square) image and the target equals its side, the result
    is an exact copy.
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if target_side is None:
        target_side = min(h, w) // 2
    if target_side < 1:
        raise ValueError(f"target_side must be >= 1, got {target_side}")
    if rect.x < 0 or rect.y < 0 or rect.x + rect.side > w or rect.y + rect.side > h:
        raise ValueError(f"crop {rect} exceeds image of size {h}x{w}")
    window = arr[rect.y : rect.y + rect.side, rect.x : rect.x + rect.side]
    return resize_bilinear(window, (target_side, target_side))
