"""Mask transformer head over patch tokens and learnable class embeddings.

Class channels must commute with everything: permuting the class
embedding rows has to permute the output probability channels without
changing a single bit, because cluster indices carry no meaning before
Hungarian matching. Joint self-attention over [patches; classes] cannot
deliver that (softmax denominators and weighted sums would reduce over
an axis whose order changed), so the head keeps two streams: patch
tokens self-attend among themselves, class embeddings are refined
rowwise by cross-attention onto the patch stream, and nothing ever
reduces over the class axis except the final softmax, whose denominator
sums the exponentials in sorted order to stay order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from topdownseg.archive import (
    ArchiveError,
    ShapeMismatchError,
    load_archive,
    save_archive,
)
from topdownseg.encoder import _fan_in_for_bias, _trunc_normal
from topdownseg.imutil import upsample_channels_bilinear


@dataclass(frozen=True)
class DecoderConfig:
    k: int
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.embed_dim < 1 or self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )


@dataclass
class ProbabilityMaps:
    """patch_probs: (K, h, w) at token resolution; full_probs: (K, H, W)."""

    patch_probs: np.ndarray
    full_probs: np.ndarray

    def __post_init__(self):
        for name in ("patch_probs", "full_probs"):
            arr = np.asarray(getattr(self, name))
            if arr.ndim != 3:
                raise ValueError(f"{name} must be (K, h, w), got {arr.shape}")
            sums = arr.sum(axis=0)
            if np.abs(sums - 1.0).max() > 1e-5:
                raise ValueError(f"{name} channels do not sum to 1")
            setattr(self, name, arr)
        if self.patch_probs.shape[0] != self.full_probs.shape[0]:
            raise ValueError("patch_probs and full_probs disagree on K")


def mask_op(tokens, embeddings):
    """Scaled dot-product mask logits: tokens @ embeddings^T / sqrt(d).

    Accepts numpy arrays or torch tensors, optionally batched; the last
    two axes are (n, d) and (K, d). No bias, no other terms.
    """
    d = embeddings.shape[-1]
    if tokens.shape[-1] != d:
        raise ValueError(
            f"token dim {tokens.shape[-1]} != embedding dim {d}"
        )
    if isinstance(tokens, torch.Tensor):
        return tokens @ embeddings.transpose(-1, -2) / math.sqrt(d)
    return tokens @ np.swapaxes(embeddings, -1, -2) / math.sqrt(d)


def sorted_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with an order-independent denominator.

    Sorting the exponentials before summing makes the reduction a
    function of the value multiset alone, so permuting the axis permutes
    the outputs bitwise.
    """
    peak = logits.max(dim=-1, keepdim=True).values
    exps = (logits - peak).exp()
    denom = torch.sort(exps, dim=-1).values.sum(dim=-1, keepdim=True)
    return exps / denom


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, _ = x.shape
        qkv = (
            self.qkv(x)
            .reshape(B, N, 3, self.heads, self.head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, -1)
        return self.proj(out)


class _CrossAttention(nn.Module):
    """Each query row attends over the key/value sequence independently;
    the softmax reduces only along the key axis, never across queries."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(self, queries, context):
        B, K, _ = queries.shape
        n = context.shape[1]
        q = self.q(queries).reshape(B, K, self.heads, self.head_dim).transpose(1, 2)
        kv = (
            self.kv(context)
            .reshape(B, n, 2, self.heads, self.head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, K, -1)
        return self.proj(out)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.patch_norm1 = nn.LayerNorm(dim)
        self.patch_attn = _SelfAttention(dim, heads)
        self.patch_norm2 = nn.LayerNorm(dim)
        self.patch_mlp = _Mlp(dim, hidden)
        self.class_norm1 = nn.LayerNorm(dim)
        self.class_attn = _CrossAttention(dim, heads)
        self.class_norm2 = nn.LayerNorm(dim)
        self.class_mlp = _Mlp(dim, hidden)

    def forward(self, x, c):
        x = x + self.patch_attn(self.patch_norm1(x))
        x = x + self.patch_mlp(self.patch_norm2(x))
        c = c + self.class_attn(self.class_norm1(c), x)
        c = c + self.class_mlp(self.class_norm2(c))
        return x, c


class MaskDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.class_embed = nn.Parameter(torch.zeros(config.k, config.embed_dim))
        self.blocks = nn.ModuleList(
            _Block(config.embed_dim, config.heads, config.mlp_ratio)
            for _ in range(config.layers)
        )
        self.patch_norm = nn.LayerNorm(config.embed_dim)
        self.class_norm = nn.LayerNorm(config.embed_dim)
        self.to(dtype)
        _seed_parameters(self, config.seed)

    @property
    def dtype(self) -> torch.dtype:
        return self.class_embed.dtype

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens (B, n, d) -> per-token class probabilities (B, n, K)."""
        if tokens.dim() != 3 or tokens.shape[-1] != self.config.embed_dim:
            raise ValueError(
                f"expected (B, n, {self.config.embed_dim}) tokens, got {tuple(tokens.shape)}"
            )
        x = tokens
        c = self.class_embed[None].expand(tokens.shape[0], -1, -1)
        for block in self.blocks:
            x, c = block(x, c)
        logits = mask_op(self.patch_norm(x), self.class_norm(c))
        return sorted_softmax(logits)


def class_embeddings(model: MaskDecoder) -> torch.Tensor:
    """The learnable (K, d) class embedding matrix, gradient-capable."""
    return model.class_embed


def decode(
    model: MaskDecoder, tokens: np.ndarray, image_hw: tuple[int, int]
) -> ProbabilityMaps:
    """Run the head on one (h, w, d) token grid and upsample to image size."""
    arr = np.asarray(tokens)
    if arr.ndim != 3:
        raise ValueError(f"tokens must be (h, w, d), got {arr.shape}")
    if arr.shape[2] != model.config.embed_dim:
        raise ValueError(
            f"token dim {arr.shape[2]} does not match decoder dim {model.config.embed_dim}"
        )
    if not np.isfinite(arr).all():
        raise ValueError("tokens contain non-finite values")
    h, w = arr.shape[:2]
    model.eval()
    with torch.no_grad():
        flat = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
        probs = model(flat.reshape(1, h * w, -1).to(model.dtype))
    patch_probs = (
        probs[0].transpose(0, 1).reshape(-1, h, w).cpu().numpy()
    )
    full_probs = upsample_channels_bilinear(patch_probs, image_hw)
    return ProbabilityMaps(patch_probs=patch_probs, full_probs=full_probs)


def _seed_parameters(model: MaskDecoder, seed: int) -> None:
    """Numpy-driven init, same conventions as the encoder: class
    embeddings truncated normal, norms identity, linear layers uniform
    over the fan-in bound."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            shape = tuple(param.shape)
            if name == "class_embed":
                values = _trunc_normal(rng, shape, 0.02)
            elif "norm" in name:
                values = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
            elif name.endswith("bias"):
                bound = 1.0 / np.sqrt(_fan_in_for_bias(model, name))
                values = rng.uniform(-bound, bound, shape)
            else:
                bound = 1.0 / np.sqrt(shape[1])
                values = rng.uniform(-bound, bound, shape)
            param.copy_(torch.from_numpy(np.asarray(values)).to(param.dtype))


def load_decoder(
    archive_path: str | Path | None,
    config: DecoderConfig,
    dtype: torch.dtype = torch.float32,
) -> MaskDecoder:
    """Build a decoder; from a weight archive if given, else seeded init."""
    model = MaskDecoder(config, dtype=dtype)
    if archive_path is None:
        return model
    tensors = load_archive(archive_path)
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    extra = sorted(set(tensors) - set(state))
    if missing or extra:
        raise ArchiveError(
            f"archive does not match decoder state: missing {missing}, unexpected {extra}"
        )
    with torch.no_grad():
        for name, param in state.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise ShapeMismatchError(
                    f"tensor {name!r}: archive shape {tuple(arr.shape)} != model shape {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr.astype(np.float32)).to(param.dtype))
    return model


def save_decoder(model: MaskDecoder, path: str | Path) -> None:
    tensors = {
        name: param.detach().cpu().numpy().astype(np.float32)
        for name, param in model.state_dict().items()
    }
    save_archive(path, tensors)
