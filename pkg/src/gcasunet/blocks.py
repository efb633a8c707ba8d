"""Gated blocks of the counting U-Net.

* :class:`GCAM` scores tokens, relates them through a self-similarity matrix and
  gates the encoder features with the resulting per-token mask.
* :class:`GEFS` refines the bottleneck with two full self-attention passes and
  adds them back through a per-token channel gate.
* :class:`GAFU` gates an encoder skip before fusing it with decoder features.

All gates are softmax-normalised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn

from .autodiff import Tensor, elementwise, matmul, mean, softmax
from .swin import LayerNorm, TokenGrid, TokenMLP, init_linear, multihead_attention

MASK_SCALE_MODES = ("literal", "rescaled")


@dataclass
class GcamIntermediates:
    """Per-token score ``C (B,N,1)``, similarity ``S (B,N,N)`` and mask ``M (B,N,1)``.

    ``M`` is the softmax over tokens, before any rescaling.
    """

    scores: Tensor
    similarity: Tensor
    mask: Tensor


class GCAM(nn.Module):
    """Gated context-aware modulation.

    ``proj = MLP(x)``; ``C = mean_c(proj)``; ``S = softmax_rows(proj proj^T)``;
    ``M = softmax_tokens(MLP(S C))``; output ``Linear(LN(LN(x * M) + proj))``.

    With ``mask_scale="rescaled"`` the mask is multiplied by the token count so
    a uniform mask leaves ``x`` unscaled.
    """

    def __init__(self, dim: int, mask_hidden: int = 4, mask_scale: str = "rescaled"):
        super().__init__()
        if mask_scale not in MASK_SCALE_MODES:
            raise ValueError(f"mask_scale must be one of {MASK_SCALE_MODES}, got {mask_scale!r}")
        self.dim = dim
        self.mask_scale = mask_scale
        # proj width equals dim so the residual in the output stage is well defined
        self.proj = TokenMLP(dim, 1.0, dim)
        self.mask_mlp = TokenMLP(1, float(mask_hidden), 1)
        for layer in (self.mask_mlp.fc1, self.mask_mlp.fc2):
            init_linear(layer, std=0.5)
        self.norm_mask = LayerNorm(dim)
        self.norm_out = LayerNorm(dim)
        self.linear = init_linear(nn.Linear(dim, dim))

    def forward_with_intermediates(self, x: TokenGrid) -> Tuple[TokenGrid, GcamIntermediates]:
        f = x.data
        proj = self.proj(f)
        scores = mean(proj, -1)
        sim = softmax(matmul(proj, proj.transpose(-2, -1)), -1)
        mask = softmax(self.mask_mlp(matmul(sim, scores)), 1)
        gate = mask * x.num_tokens if self.mask_scale == "rescaled" else mask
        y = self.norm_out(self.norm_mask(elementwise("mul", f, gate)) + proj)
        return x.with_data(self.linear(y)), GcamIntermediates(scores, sim, mask)

    def forward(self, x: TokenGrid) -> TokenGrid:
        return self.forward_with_intermediates(x)[0]

    @torch.no_grad()
    def identity_init_(self) -> "GCAM":
        """Parameters under which GCAM maps layer-normalised tokens to themselves.

        Zero projection, zero mask MLP (uniform mask), unit norms and an
        identity output layer; requires ``mask_scale="rescaled"``.
        """
        for p in list(self.proj.parameters()) + list(self.mask_mlp.parameters()):
            p.zero_()
        for norm in (self.norm_mask, self.norm_out):
            norm.weight.fill_(1.0)
            norm.bias.zero_()
        self.linear.weight.copy_(torch.eye(self.dim))
        self.linear.bias.zero_()
        return self


def gcam_forward(x: TokenGrid, params: GCAM) -> Tuple[TokenGrid, GcamIntermediates]:
    return params.forward_with_intermediates(x)


def permute_tokens(x: TokenGrid, perm) -> TokenGrid:
    return x.with_data(x.data[:, torch.as_tensor(perm, dtype=torch.long)])


def gcam_permutation_check(x: TokenGrid, perm, params: GCAM, atol: float = 1e-8) -> bool:
    """True iff permuting tokens before GCAM equals permuting its output."""
    return permutation_check(x, perm, params, atol)


def permutation_check(x: TokenGrid, perm, block: nn.Module, atol: float = 1e-8) -> bool:
    perm = torch.as_tensor(perm, dtype=torch.long)
    if sorted(perm.tolist()) != list(range(x.num_tokens)):
        raise ValueError("perm must be a bijection on token indices")
    with torch.no_grad():
        lhs = block(permute_tokens(x, perm)).data
        rhs = block(x).data[:, perm]
    return bool(torch.allclose(lhs, rhs, rtol=0.0, atol=atol))


class FullAttention(nn.Module):
    """Pre-norm multi-head self-attention over all tokens, no position terms.

    Returns the attention output only; the caller owns the residual.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"channels {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.norm = LayerNorm(dim)
        self.qkv = init_linear(nn.Linear(dim, 3 * dim))
        self.proj = init_linear(nn.Linear(dim, dim))

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        h = self.num_heads
        qkv = self.qkv(self.norm(x)).reshape(b, n, 3, h, c // h).permute(2, 0, 3, 1, 4)
        out = multihead_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class GEFS(nn.Module):
    """Gated enhanced feature selector: ``x + softmax_c(MLP(x)) * Attn(Attn(x))``."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.gate_mlp = TokenMLP(dim, 1.0, dim)
        self.attn1 = FullAttention(dim, num_heads)
        self.attn2 = FullAttention(dim, num_heads)

    def gate(self, x: TokenGrid) -> Tensor:
        return softmax(self.gate_mlp(x.data), -1)

    def forward(self, x: TokenGrid) -> TokenGrid:
        refined = self.attn2(self.attn1(x.data))
        return x.with_data(x.data + elementwise("mul", self.gate(x), refined))


def gefs_forward(x: TokenGrid, params: GEFS) -> TokenGrid:
    return params(x)


class GAFU(nn.Module):
    """Gated adaptive fusion of an encoder skip into the decoder path.

    ``G = skip + softmax_c(MLP(skip)) * skip``; output
    ``Linear([decoder, G])`` with the decoder's channel width. With
    ``gated=False`` the skip is concatenated as is (the ablation baseline).
    """

    def __init__(self, dim: int, gated: bool = True):
        super().__init__()
        self.gated = gated
        self.gate_mlp = TokenMLP(dim, 1.0, dim) if gated else None
        self.fuse = init_linear(nn.Linear(2 * dim, dim))

    def gate(self, skip: TokenGrid) -> Tensor:
        return softmax(self.gate_mlp(skip.data), -1)

    def forward(self, skip: TokenGrid, decoder: TokenGrid) -> TokenGrid:
        if (skip.batch, skip.height, skip.width) != (decoder.batch, decoder.height, decoder.width):
            raise ValueError(
                f"skip grid {skip.batch}x{skip.height}x{skip.width} does not match "
                f"decoder grid {decoder.batch}x{decoder.height}x{decoder.width}"
            )
        s = skip.data
        if self.gated:
            s = s + elementwise("mul", self.gate(skip), s)
        return decoder.with_data(self.fuse(torch.cat([decoder.data, s], dim=-1)))


def gafu_forward(skip: TokenGrid, decoder: TokenGrid, params: GAFU) -> TokenGrid:
    return params(skip, decoder)
