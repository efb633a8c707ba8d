"""Swin-style building blocks on token grids.

Patch embedding, (shifted) window multi-head self-attention with a learned
relative position bias, token MLP, and 2x patch merging / expanding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import Tensor, layer_norm, matmul, softmax


@dataclass
class TokenGrid:
    """Batch of token features laid out on a ``height x width`` grid.

    ``data`` has shape ``(batch, height * width, channels)``, row-major over
    the grid.
    """

    data: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1] != self.height * self.width:
            raise ValueError(
                f"token data {tuple(self.data.shape)} does not match a {self.height}x{self.width} grid"
            )

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def num_tokens(self) -> int:
        return self.height * self.width

    def spatial(self) -> Tensor:
        """View as ``(batch, height, width, channels)``."""
        return self.data.reshape(self.batch, self.height, self.width, self.channels)

    @classmethod
    def from_spatial(cls, x: Tensor) -> "TokenGrid":
        b, h, w, c = x.shape
        return cls(x.reshape(b, h * w, c), h, w)

    def with_data(self, data: Tensor) -> "TokenGrid":
        return TokenGrid(data, self.height, self.width)


def init_linear(layer: nn.Linear, std: float = 0.02) -> nn.Linear:
    nn.init.trunc_normal_(layer.weight, std=std, a=-2 * std, b=2 * std)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class LayerNorm(nn.Module):
    """Layer norm over the last axis."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, -1, self.weight, self.bias, self.eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


class PatchEmbed(nn.Module):
    """Split an image into ``patch_size`` squares and project each to ``embed_dim``.

    Patch pixels are flattened in (row, column, colour) order.
    """

    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 3, norm: bool = True):
        super().__init__()
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.proj = init_linear(nn.Linear(patch_size * patch_size * in_chans, embed_dim))
        self.norm = LayerNorm(embed_dim) if norm else None

    def forward(self, image: Tensor) -> TokenGrid:
        b, h, w, c = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
        x = image.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, (h // p) * (w // p), p * p * c)
        x = self.proj(x)
        if self.norm is not None:
            x = self.norm(x)
        return TokenGrid(x, h // p, w // p)


def window_partition(x: Tensor, ws: int) -> Tensor:
    """``(B, H, W, C)`` -> ``(B * nW, ws * ws, C)``."""
    b, h, w, c = x.shape
    x = x.reshape(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def window_reverse(windows: Tensor, ws: int, b: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    x = windows.reshape(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def relative_position_index(ws: int) -> Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
    return rel[..., 0] * (2 * ws - 1) + rel[..., 1]


def shift_attention_mask(h: int, w: int, ws: int, shift: int) -> Tensor:
    """Additive mask ``(nW, ws*ws, ws*ws)`` blocking attention across the roll seam."""
    region = torch.zeros(1, h, w, 1)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            region[:, hs, wsl, :] = cnt
            cnt += 1
    win = window_partition(region, ws).squeeze(-1)
    diff = win[:, None, :] - win[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, -1e4)


def multihead_attention(
    q: Tensor, k: Tensor, v: Tensor, bias: Optional[Tensor] = None
) -> Tensor:
    """Scaled dot-product attention on ``(B, heads, N, d)`` tensors."""
    scale = q.shape[-1] ** -0.5
    logits = matmul(q * scale, k.transpose(-2, -1))
    if bias is not None:
        logits = logits + bias
    return matmul(softmax(logits, -1), v)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping ``window_size`` windows."""

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"channels {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.qkv = init_linear(nn.Linear(dim, 3 * dim))
        self.proj = init_linear(nn.Linear(dim, dim))
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02, a=-0.04, b=0.04)
        self.register_buffer("relative_position_index", relative_position_index(window_size), persistent=False)

    def position_bias(self) -> Tensor:
        n = self.window_size ** 2
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        return bias.reshape(n, n, self.num_heads).permute(2, 0, 1)

    def attend(self, windows: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        """Attention over ``(B * nW, n, C)`` windows; ``mask`` is ``(nW, n, n)``."""
        bw, n, c = windows.shape
        qkv = self.qkv(windows).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        bias = self.position_bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            bias = (bias.unsqueeze(0) + mask.to(bias.dtype)[:, None]).reshape(1, nw, self.num_heads, n, n)
            bias = bias.expand(bw // nw, -1, -1, -1, -1).reshape(bw, self.num_heads, n, n)
        out = multihead_attention(qkv[0], qkv[1], qkv[2], bias)
        return self.proj(out.transpose(1, 2).reshape(bw, n, c))

    def shift_for(self, x: TokenGrid, shifted: bool) -> int:
        if not shifted or min(x.height, x.width) <= self.window_size:
            return 0
        return self.window_size // 2

    def forward(self, x: TokenGrid, shifted: bool = False) -> TokenGrid:
        ws = self.window_size
        if x.height % ws or x.width % ws:
            raise ValueError(f"grid {x.height}x{x.width} is not divisible by window size {ws}")
        shift = self.shift_for(x, shifted)
        s = x.spatial()
        mask = None
        if shift:
            s = torch.roll(s, shifts=(-shift, -shift), dims=(1, 2))
            mask = shift_attention_mask(x.height, x.width, ws, shift)
        out = self.attend(window_partition(s, ws), mask)
        s = window_reverse(out, ws, x.batch, x.height, x.width)
        if shift:
            s = torch.roll(s, shifts=(shift, shift), dims=(1, 2))
        return TokenGrid.from_spatial(s)


def window_attention(x: TokenGrid, params: WindowAttention, shifted: bool = False) -> TokenGrid:
    return params(x, shifted)


class TokenMLP(nn.Module):
    """Per-token two-layer MLP with a GELU in between."""

    def __init__(self, dim: int, hidden_ratio: float = 4.0, out_dim: Optional[int] = None):
        super().__init__()
        self.hidden = int(round(dim * hidden_ratio))
        self.fc1 = init_linear(nn.Linear(dim, self.hidden))
        self.fc2 = init_linear(nn.Linear(self.hidden, out_dim or dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def token_mlp(x: TokenGrid, mlp: TokenMLP) -> TokenGrid:
    return x.with_data(mlp(x.data))


class SwinBlock(nn.Module):
    """Pre-norm block: ``x + (S)W-MSA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.shifted = shifted
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = LayerNorm(dim)
        self.mlp = TokenMLP(dim, mlp_ratio)

    def forward(self, x: TokenGrid) -> TokenGrid:
        h = self.attn(x.with_data(self.norm1(x.data)), self.shifted)
        y = x.data + h.data
        y = y + self.mlp(self.norm2(y))
        return x.with_data(y)


class SwinStage(nn.Sequential):
    """``depth`` Swin blocks alternating plain and shifted windows."""

    def __init__(self, dim: int, depth: int, num_heads: int, window_size: int):
        super().__init__(*[SwinBlock(dim, num_heads, window_size, shifted=bool(i % 2)) for i in range(depth)])


class PatchMerge(nn.Module):
    """Halve the grid: concatenate each 2x2 neighbourhood and project ``4C -> 2C``.

    Children are concatenated in row-major order: (0,0), (0,1), (1,0), (1,1).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = init_linear(nn.Linear(4 * dim, 2 * dim, bias=False))

    def forward(self, x: TokenGrid) -> TokenGrid:
        if x.height % 2 or x.width % 2:
            raise ValueError(f"patch merge needs an even grid, got {x.height}x{x.width}")
        b, h, w, c = x.batch, x.height, x.width, x.channels
        s = x.spatial().reshape(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
        s = s.reshape(b, h // 2, w // 2, 4 * c)
        return TokenGrid.from_spatial(self.reduction(s))


class PatchExpand(nn.Module):
    """Double the grid: project ``C -> 2C`` then scatter to 2x2 cells of ``C/2``.

    The projected vector is split as (row offset, column offset, channel).
    """

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"patch expand needs an even channel count, got {dim}")
        self.expand = init_linear(nn.Linear(dim, 2 * dim, bias=False))

    def forward(self, x: TokenGrid) -> TokenGrid:
        b, h, w, c = x.batch, x.height, x.width, x.channels
        if c % 2:
            raise ValueError(f"patch expand needs an even channel count, got {c}")
        s = self.expand(x.spatial()).reshape(b, h, w, 2, 2, c // 2).permute(0, 1, 3, 2, 4, 5)
        return TokenGrid.from_spatial(s.reshape(b, 2 * h, 2 * w, c // 2))


def patch_merge(x: TokenGrid, params: PatchMerge) -> TokenGrid:
    return params(x)


def patch_expand(x: TokenGrid, params: PatchExpand) -> TokenGrid:
    return params(x)


def patch_embed(image: Tensor, params: PatchEmbed) -> TokenGrid:
    return params(image)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = [
    "TokenGrid",
    "LayerNorm",
    "PatchEmbed",
    "WindowAttention",
    "TokenMLP",
    "SwinBlock",
    "SwinStage",
    "PatchMerge",
    "PatchExpand",
    "window_attention",
    "patch_merge",
    "patch_expand",
    "patch_embed",
    "token_mlp",
    "multihead_attention",
    "param_count",
]
