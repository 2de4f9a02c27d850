"""Fixed-geometry vision transformer backbone.

The encoder is frozen throughout the pipeline; it exists to produce
class-token features, patch tokens, and the last block's class-attention
row. That row doubles as the probe point for response gradients: the
forward pass can add a zero-valued perturbation to every head's
post-softmax class row, and differentiating an objective with respect to
that perturbation yields the summed per-head row gradient. An objective
equal to the sum of the exposed (head-averaged) map entries therefore
has gradient exactly one at every cell, which the finite-difference
tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from scipy.stats import truncnorm
from torch import nn

from topdownseg.archive import (
    ArchiveError,
    ShapeMismatchError,
    load_archive,
    save_archive,
)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    embed_dim: int = 32
    attn_dim: int = 32
    heads: int = 2
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.attn_dim % self.heads != 0:
            raise ValueError(
                f"attn_dim {self.attn_dim} not divisible by heads {self.heads}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class FeatureBundle:
    """Per-image encoder outputs.

    cls:           (embed_dim,) class-token feature
    patch:         (h, w, embed_dim) patch tokens
    cls_attention: (h, w) head-averaged class-to-patch attention
    cls_self:      class token's attention onto itself; kept so the full
                   row (self entry plus grid) can be checked to sum to 1
    """

    cls: np.ndarray
    patch: np.ndarray
    cls_attention: np.ndarray
    cls_self: float
    image_id: str | None = field(default=None)


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _Attention(nn.Module):
    def __init__(self, dim: int, attn_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = attn_dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, attn_dim * 3)
        self.proj = nn.Linear(attn_dim, dim)

    def forward(self, x, tap=None):
        B, N, _ = x.shape
        qkv = (
            self.qkv(x)
            .reshape(B, N, 3, self.heads, self.head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        if tap is not None:
            # Zero-valued additive probe on every head's class row. The
            # exposed map and the value path both see it, so gradients
            # w.r.t. the tap are the summed per-head row gradients.
            row = torch.cat([tap.new_zeros(1), tap])
            bump = torch.cat([row.unsqueeze(0), row.new_zeros(N - 1, N)], dim=0)
            attn = attn + bump
        out = (attn @ v).transpose(1, 2).reshape(B, N, self.heads * self.head_dim)
        out = self.proj(out)
        return out, attn[:, :, 0, :]


class _Block(nn.Module):
    def __init__(self, dim: int, attn_dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, attn_dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, tap=None):
        out, cls_row = self.attn(self.norm1(x), tap=tap)
        x = x + out
        x = x + self.mlp(self.norm2(x))
        return x, cls_row


class _PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class VisionEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.grid = (config.grid_size, config.grid_size)
        self.patch_embed = _PatchEmbed(config.patch_size, config.embed_dim)
        n_tokens = 1 + config.grid_size ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, config.embed_dim))
        self.blocks = nn.ModuleList(
            _Block(config.embed_dim, config.attn_dim, config.heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.to(dtype)
        _seed_parameters(self, config.seed)

    @property
    def dtype(self) -> torch.dtype:
        return self.cls_token.dtype

    def forward(self, images: torch.Tensor, tap: torch.Tensor | None = None):
        """Return (cls, patch, cls_attention, cls_self) torch tensors.

        images: (B, 3, H, W) with H = W = config.image_size.
        """
        B = images.shape[0]
        x = self.patch_embed(images)
        cls = self.cls_token.expand(B, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        last_row = None
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            x, row = blk(x, tap=tap if i == last else None)
            if i == last:
                last_row = row
        x = self.norm(x)
        row_avg = last_row.mean(dim=1)  # average heads: (B, N)
        return x[:, 0], x[:, 1:], row_avg[:, 1:], row_avg[:, 0]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    u = rng.random(shape)
    return truncnorm.ppf(u, -2.0, 2.0) * std


def _seed_parameters(model: VisionEncoder, seed: int) -> None:
    """Deterministic init driven by numpy so results never depend on the
    torch RNG implementation. Linear/conv weights and biases follow the
    usual uniform fan-in rule; norms are identity; token/position
    embeddings are truncated normal."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            shape = tuple(param.shape)
            if name in ("cls_token", "pos_embed"):
                values = _trunc_normal(rng, shape, 0.02)
            elif "norm" in name:
                values = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
            elif name.endswith("bias"):
                fan_in = _fan_in_for_bias(model, name)
                bound = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-bound, bound, shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-bound, bound, shape)
            param.copy_(torch.from_numpy(np.asarray(values)).to(param.dtype))


def _fan_in_for_bias(model: nn.Module, bias_name: str) -> int:
    weight_name = bias_name[: -len("bias")] + "weight"
    weight = dict(model.named_parameters())[weight_name]
    return int(np.prod(tuple(weight.shape)[1:]))


def load_weights(
    archive_path: str | Path | None,
    config: EncoderConfig,
    dtype: torch.dtype = torch.float32,
) -> VisionEncoder:
    """Build an encoder; from an archive if given, else seeded random init.

    Archive tensors must match the model's state (same names, same
    shapes); a shape disagreement raises ShapeMismatchError naming the
    offending tensor.
    """
    model = VisionEncoder(config, dtype=dtype)
    if archive_path is None:
        model.eval()
        return model
    tensors = load_archive(archive_path)
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    extra = sorted(set(tensors) - set(state))
    if missing or extra:
        raise ArchiveError(
            f"archive does not match encoder state: missing {missing}, unexpected {extra}"
        )
    with torch.no_grad():
        for name, param in state.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise ShapeMismatchError(
                    f"tensor {name!r}: archive shape {tuple(arr.shape)} != model shape {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr.astype(np.float32)).to(param.dtype))
    model.eval()
    return model


def save_weights(model: VisionEncoder, path: str | Path) -> None:
    tensors = {
        name: param.detach().cpu().numpy().astype(np.float32)
        for name, param in model.state_dict().items()
    }
    save_archive(path, tensors)


def convert_external_vit_state(
    state: Mapping[str, np.ndarray], config: EncoderConfig
) -> dict[str, np.ndarray]:
    """Select and validate external ViT checkpoint arrays for this model.

    The backbone deliberately uses the conventional naming of public
    self-supervised ViT releases (cls_token, pos_embed,
    patch_embed.proj.*, blocks.N.attn.qkv/proj, blocks.N.mlp.fc1/fc2,
    norm), so conversion is selection plus shape checking: classifier
    heads and other extras in the checkpoint are dropped. Geometry must
    already agree with ``config``; no positional-embedding interpolation
    is attempted.

    Returns a dict suitable for save_archive; raises ArchiveError when a
    required tensor is absent and ShapeMismatchError when a shape
    disagrees.
    """
    reference = VisionEncoder(config)
    expected = {
        name: tuple(p.shape) for name, p in reference.state_dict().items()
    }
    out: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        if name not in state:
            raise ArchiveError(f"external checkpoint lacks tensor {name!r}")
        arr = np.asarray(state[name], dtype=np.float32)
        if tuple(arr.shape) != shape:
            raise ShapeMismatchError(
                f"tensor {name!r}: external shape {tuple(arr.shape)} != expected {shape}"
            )
        out[name] = arr
    return out


def _to_batch_tensor(images: np.ndarray, config: EncoderConfig, dtype) -> torch.Tensor:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got shape {arr.shape}")
    if arr.shape[1] != config.image_size or arr.shape[2] != config.image_size:
        raise ValueError(
            f"encoder expects {config.image_size}x{config.image_size} inputs, "
            f"got {arr.shape[1]}x{arr.shape[2]}"
        )
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"images must be float arrays in [0, 1], got {arr.dtype}")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6):
        raise ValueError("image values must lie in [0, 1]")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    return t.permute(0, 3, 1, 2).to(dtype)


def encode(
    model: VisionEncoder, images: np.ndarray, batch_size: int = 128
) -> list[FeatureBundle]:
    """Encode a batch of (B, H, W, 3) float images in [0, 1].

    Pure function of (weights, pixels): no dropout, no RNG, so repeated
    calls return bit-identical bundles.
    """
    batch = _to_batch_tensor(images, model.config, model.dtype)
    h, w = model.grid
    bundles: list[FeatureBundle] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, batch.shape[0], batch_size):
            chunk = batch[start : start + batch_size]
            cls, patch, attn, attn_self = model(chunk)
            for i in range(chunk.shape[0]):
                bundles.append(
                    FeatureBundle(
                        cls=cls[i].cpu().numpy(),
                        patch=patch[i].reshape(h, w, -1).cpu().numpy(),
                        cls_attention=attn[i].reshape(h, w).cpu().numpy(),
                        cls_self=float(attn_self[i]),
                    )
                )
    return bundles


@dataclass
class _TorchFeatureView:
    """FeatureBundle-shaped view whose fields stay on the autograd tape."""

    cls: torch.Tensor
    patch: torch.Tensor
    cls_attention: torch.Tensor
    cls_self: torch.Tensor


def attention_grad(
    model: VisionEncoder,
    image: np.ndarray,
    objective: Callable[[_TorchFeatureView], torch.Tensor],
) -> tuple[np.ndarray, bool]:
    """Gradient of a scalar objective w.r.t. the class-attention grid.

    The objective receives the encoder outputs as torch tensors and must
    return a scalar. Differentiation targets an additive zero probe on
    the last block's post-softmax class row (summed over heads). An
    objective with no path to the attention yields (zero grid, False)
    instead of raising.
    """
    batch = _to_batch_tensor(image, model.config, model.dtype)
    if batch.shape[0] != 1:
        raise ValueError("attention_grad takes a single image")
    h, w = model.grid
    tap = torch.zeros(h * w, dtype=model.dtype, requires_grad=True)
    model.eval()
    cls, patch, attn, attn_self = model(batch, tap=tap)
    view = _TorchFeatureView(
        cls=cls[0],
        patch=patch[0].reshape(h, w, -1),
        cls_attention=attn[0].reshape(h, w),
        cls_self=attn_self[0],
    )
    value = objective(view)
    if not isinstance(value, torch.Tensor) or value.dim() != 0:
        raise ValueError("objective must return a scalar tensor")
    if not value.requires_grad:
        return np.zeros((h, w), dtype=np.float64), False
    (grad,) = torch.autograd.grad(value, tap, allow_unused=True)
    if grad is None:
        return np.zeros((h, w), dtype=np.float64), False
    return grad.detach().reshape(h, w).cpu().numpy().astype(np.float64), True
