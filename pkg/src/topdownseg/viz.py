"""Raster rendering for labels and concept response maps.

Everything here is plain uint8 image construction: color lookup tables
for class grids, grayscale heat rasters for response channels, and a
side-by-side panel. No model is needed; the inputs come straight from
pseudo-label bank records and the dataset images.
"""

from __future__ import annotations

import colorsys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from topdownseg.datasets import DEFAULT_PALETTE
from topdownseg.imutil import resize_bilinear
from topdownseg.pseudolabels import IGNORE_LABEL, PseudoLabel

BG_COLOR = (64, 64, 64)
IGNORE_COLOR = (255, 255, 255)

# Hue increment for palette extension. An irrational step never revisits
# a hue, so arbitrarily many classes stay distinguishable.
_GOLDEN = (5 ** 0.5 - 1) / 2


def class_palette(n: int) -> np.ndarray:
    """(n, 3) uint8 colors for classes 1..n.

    The first entries reuse the synthetic dataset palette so rendered
    labels line up with the generated images; beyond that the hue wheel
    is walked in golden-ratio steps. The prefix is stable as n grows.
    """
    if n < 0:
        raise ValueError(f"palette size must be non-negative, got {n}")
    colors = [
        tuple(int(round(255.0 * c)) for c in rgb) for rgb in DEFAULT_PALETTE
    ]
    hue = 0.11
    while len(colors) < n:
        hue = (hue + _GOLDEN) % 1.0
        rgb = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
        colors.append(tuple(int(round(255.0 * c)) for c in rgb))
    return np.asarray(colors[:n], dtype=np.uint8).reshape(n, 3)


def colorize_label(label: np.ndarray) -> np.ndarray:
    """Map a (H, W) class grid to (H, W, 3) uint8.

    Class 0 renders dark gray (it is background under the things_only
    protocol and just another region elsewhere), classes 1..n take the
    palette, and the ignore value renders white.
    """
    arr = np.asarray(label)
    if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"label must be a 2-d integer grid, got {arr.dtype} shape {arr.shape}")
    if arr.min(initial=0) < 0:
        raise ValueError("label values must be non-negative")
    top = max(int(arr.max(initial=0)), IGNORE_LABEL)
    lut = np.zeros((top + 1, 3), dtype=np.uint8)
    lut[0] = BG_COLOR
    lut[1:] = class_palette(top)
    lut[IGNORE_LABEL] = IGNORE_COLOR
    return lut[arr]


def heatmap(response: np.ndarray, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Render one response channel as (H, W) uint8 grayscale.

    Values are clipped to [0, 1] and scaled, never re-normalized, so
    brightness stays comparable across channels and across images.
    """
    arr = np.asarray(response, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"response must be (h, w), got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("response contains non-finite values")
    if out_hw is not None:
        arr = resize_bilinear(arr, out_hw)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def _to_rgb(raster: np.ndarray) -> np.ndarray:
    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        raise ValueError(f"panels must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        return np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr
    raise ValueError(f"panel must be (H, W) or (H, W, 3), got shape {arr.shape}")


def hstack_panels(panels: Sequence[np.ndarray], pad: int = 2) -> np.ndarray:
    """Concatenate rasters left to right with a white gutter between."""
    if not panels:
        raise ValueError("need at least one panel")
    rgb = [_to_rgb(p) for p in panels]
    height = rgb[0].shape[0]
    if any(p.shape[0] != height for p in rgb):
        raise ValueError("panels must share a height")
    gutter = np.full((height, pad, 3), 255, dtype=np.uint8)
    parts: list[np.ndarray] = []
    for i, panel in enumerate(rgb):
        if i and pad:
            parts.append(gutter)
        parts.append(panel)
    return np.concatenate(parts, axis=1)


def write_raster(raster: np.ndarray, path: str | Path) -> None:
    """Save a uint8 grayscale or RGB array as a PNG."""
    arr = _to_rgb(raster) if np.asarray(raster).ndim == 2 else np.asarray(raster)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"raster must be uint8 (H, W[, 3]), got {arr.dtype} shape {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def render_record(
    image: np.ndarray,
    record: PseudoLabel,
    out_dir: str | Path,
    slug: str,
) -> list[Path]:
    """Write image, label, per-concept heat rasters, and a joined panel.

    The heat rasters cover the concept response channels only; when the
    record carries a derived background channel it is visible through
    the label raster already. Returns every written path, panel last.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got shape {arr.shape}")
    hw = record.label.shape
    if arr.shape[:2] != hw:
        raise ValueError(
            f"image size {arr.shape[:2]} does not match label size {hw}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    image_u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    panels = [image_u8, colorize_label(record.label)]
    panels.extend(
        heatmap(record.responses[j], hw) for j in range(record.responses.shape[0])
    )

    paths: list[Path] = []
    names = [f"{slug}_image.png", f"{slug}_label.png"]
    names.extend(f"{slug}_cam{j}.png" for j in range(record.responses.shape[0]))
    for name, raster in zip(names, panels):
        target = out_dir / name
        write_raster(raster, target)
        paths.append(target)
    panel_path = out_dir / f"{slug}_panel.png"
    write_raster(hstack_panels(panels), panel_path)
    paths.append(panel_path)
    return paths
