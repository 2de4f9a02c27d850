"""Small resampling helpers shared across stages.

Bilinear resampling goes through torch's interpolate with
align_corners=False, i.e. output cell centers map to
(i + 0.5) * in/out - 0.5 in source coordinates. The nearest-neighbor
label resampler uses the same half-pixel-center convention so label
grids stay aligned with bilinearly resized images.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def resize_bilinear(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize (H, W) or (H, W, C) float arrays with bilinear interpolation."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        return resize_bilinear(arr[:, :, None], out_hw)[:, :, 0]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) array, got shape {arr.shape}")
    th, tw = out_hw
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {out_hw}")
    if arr.shape[:2] == (th, tw):
        return arr.copy()
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=dtype)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(th, tw), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def resize_nearest(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize a label or index grid (H, W) by nearest source cell center."""
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) grid, got shape {arr.shape}")
    th, tw = out_hw
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {out_hw}")
    h, w = arr.shape
    rows = np.floor((np.arange(th) + 0.5) * (h / th)).astype(np.int64)
    cols = np.floor((np.arange(tw) + 0.5) * (w / tw)).astype(np.int64)
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)
    return arr[rows[:, None], cols[None, :]].copy()


def upsample_channels_bilinear(stack: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a (C, h, w) stack channel by channel.

    Channels are resized one at a time on purpose: the channels are
    nominal class ids, and a multi-channel interpolate kernel rounds
    tail channels differently, which would break the requirement that
    permuting class channels permutes outputs bit for bit.
    """
    arr = np.asarray(stack)
    if arr.ndim != 3:
        raise ValueError(f"expected (C, h, w) stack, got shape {arr.shape}")
    return np.stack([resize_bilinear(channel, out_hw) for channel in arr])
