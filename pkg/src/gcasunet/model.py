"""The full U-shaped counter and its configuration.

Encoder stage ``i``: GCAM -> Swin pair -> patch merge (the pre-merge features
are kept as skips). Bottleneck: GEFS. Decoder stage ``j``: patch expand ->
GAFU with the matching skip -> Swin pair. A convolutional head upsamples the
patch-resolution tokens to a full-resolution, nonnegative density map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import GAFU, GCAM, GEFS, MASK_SCALE_MODES
from .swin import LayerNorm, PatchEmbed, PatchExpand, PatchMerge, SwinStage, TokenGrid, gelu

TOGGLES = ("gcam", "gefs", "gafu")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    stages: int = 2
    patch_size: int = 4
    embed_dim: int = 32
    window_size: int = 4
    heads_per_stage: Tuple[int, ...] = (2, 4)
    depths_per_stage: Tuple[int, ...] = (2, 2)
    bottleneck_heads: int = 8
    mask_scale_mode: str = "rescaled"
    gcam: bool = True
    gefs: bool = True
    gafu: bool = True
    input_size: int = 64
    head_min_channels: int = 8

    def __post_init__(self):
        self.heads_per_stage = tuple(int(h) for h in self.heads_per_stage)
        self.depths_per_stage = tuple(int(d) for d in self.depths_per_stage)
        self.validate()

    def validate(self) -> None:
        k = self.stages
        if k < 1:
            raise ConfigError(f"stages must be >= 1, got {k}")
        if len(self.heads_per_stage) != k or len(self.depths_per_stage) != k:
            raise ConfigError(
                f"heads_per_stage {self.heads_per_stage} and depths_per_stage "
                f"{self.depths_per_stage} must both have length stages={k}"
            )
        p = self.patch_size
        if p < 2 or p & (p - 1):
            raise ConfigError(f"patch_size must be a power of two >= 2, got {p}")
        if self.input_size % p:
            raise ConfigError(f"input_size {self.input_size} not divisible by patch_size {p}")
        grid = self.input_size // p
        if grid % (2 ** k):
            raise ConfigError(f"token grid {grid} not divisible by 2^stages = {2 ** k}")
        for i in range(k):
            g, dim = grid >> i, self.embed_dim << i
            if g % self.window_size:
                raise ConfigError(f"stage {i + 1} grid {g} not divisible by window_size {self.window_size}")
            if dim % self.heads_per_stage[i]:
                raise ConfigError(f"stage {i + 1} width {dim} not divisible by {self.heads_per_stage[i]} heads")
        if (self.embed_dim << k) % self.bottleneck_heads:
            raise ConfigError(f"bottleneck width {self.embed_dim << k} not divisible by {self.bottleneck_heads} heads")
        if self.mask_scale_mode not in MASK_SCALE_MODES:
            raise ConfigError(f"mask_scale_mode must be one of {MASK_SCALE_MODES}")

    @property
    def toggles(self) -> Dict[str, bool]:
        return {t: getattr(self, t) for t in TOGGLES}

    def stage_shapes(self) -> List[Tuple[int, int]]:
        """``(grid side, channels)`` of each encoder stage before merging."""
        grid = self.input_size // self.patch_size
        return [(grid >> i, self.embed_dim << i) for i in range(self.stages)]

    def to_text(self) -> str:
        """Canonical ``key=value`` lines, sorted by key."""
        lines = []
        for k, v in sorted(asdict(self).items()):
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            values[k.strip()] = v.strip()
        return cls(**coerce_fields(cls, values))


def coerce_fields(cls, values: Dict[str, object]) -> Dict[str, object]:
    """Convert string values to the types of ``cls``'s dataclass defaults."""
    out = {}
    known = {f.name: f for f in fields(cls)}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown {cls.__name__} key {k!r}")
        default = known[k].default
        if not isinstance(v, str):
            out[k] = v
        elif isinstance(default, bool):
            if v.lower() not in ("true", "false", "on", "off", "1", "0", "yes", "no"):
                raise ConfigError(f"{k}: expected a boolean, got {v!r}")
            out[k] = v.lower() in ("true", "on", "1", "yes")
        elif isinstance(default, tuple):
            out[k] = tuple(int(x) for x in v.replace(" ", "").split(",") if x)
        elif isinstance(default, int):
            out[k] = int(v)
        elif isinstance(default, float):
            out[k] = float(v)
        else:
            out[k] = v
    return out


TOY_CONFIG = ModelConfig()
MICRO_CONFIG = ModelConfig(
    stages=1, patch_size=2, embed_dim=8, window_size=4,
    heads_per_stage=(2,), depths_per_stage=(2,), bottleneck_heads=2, input_size=16,
)


class RegressionHead(nn.Module):
    """Tokens at patch resolution -> nonnegative density map at pixel resolution.

    ``log2(patch_size)`` stages of [bilinear x2 -> 3x3 conv -> GELU], halving
    channels down to ``min_channels``, then a 1x1 conv and a ReLU.
    """

    def __init__(self, dim: int, patch_size: int, min_channels: int = 8, init_density: float = 2e-3):
        super().__init__()
        self.ups = nn.ModuleList()
        c = dim
        for _ in range(int(np.log2(patch_size))):
            nxt = max(c // 2, min_channels)
            self.ups.append(nn.Conv2d(c, nxt, 3, padding=1))
            c = nxt
        self.out = nn.Conv2d(c, 1, 1)
        # start near a small uniform density so the final ReLU is live everywhere
        nn.init.normal_(self.out.weight, std=1e-3)
        nn.init.constant_(self.out.bias, init_density)

    def forward(self, x: TokenGrid) -> torch.Tensor:
        y = x.spatial().permute(0, 3, 1, 2)
        for conv in self.ups:
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False)
            y = gelu(conv(y))
        return F.relu(self.out(y)).squeeze(1)


def regression_head(tokens: TokenGrid, params: RegressionHead) -> torch.Tensor:
    return params(tokens)


class GCASUNet(nn.Module):
    """Gated context-aware Swin U-Net mapping ``(B, H, W, 3)`` images to ``(B, H, W)`` densities."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        k = cfg.stages
        dims = [cfg.embed_dim << i for i in range(k)]
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim)
        self.gcam = nn.ModuleList(
            [GCAM(d, mask_scale=cfg.mask_scale_mode) for d in dims] if cfg.gcam else []
        )
        self.encoder = nn.ModuleList(
            [SwinStage(d, cfg.depths_per_stage[i], cfg.heads_per_stage[i], cfg.window_size) for i, d in enumerate(dims)]
        )
        self.merge = nn.ModuleList([PatchMerge(d) for d in dims])
        self.gefs = GEFS(dims[-1] * 2, cfg.bottleneck_heads) if cfg.gefs else None
        # decoder stage j consumes the skip of encoder stage k-1-j (0-based)
        dec = list(reversed(range(k)))
        self.expand = nn.ModuleList([PatchExpand(dims[i] * 2) for i in dec])
        self.fuse = nn.ModuleList([GAFU(dims[i], gated=cfg.gafu) for i in dec])
        self.decoder = nn.ModuleList(
            [SwinStage(dims[i], cfg.depths_per_stage[i], cfg.heads_per_stage[i], cfg.window_size) for i in dec]
        )
        self.norm = LayerNorm(cfg.embed_dim)
        self.head = RegressionHead(cfg.embed_dim, cfg.patch_size, cfg.head_min_channels)

    def encode(self, image: torch.Tensor) -> Tuple[TokenGrid, List[TokenGrid]]:
        x = self.patch_embed(image)
        skips = []
        for i in range(self.cfg.stages):
            if self.cfg.gcam:
                x = self.gcam[i](x)
            x = self.encoder[i](x)
            skips.append(x)
            x = self.merge[i](x)
        return x, skips

    def decode(self, x: TokenGrid, skips: List[TokenGrid]) -> TokenGrid:
        for j in range(self.cfg.stages):
            x = self.expand[j](x)
            x = self.fuse[j](skips[-1 - j], x)
            x = self.decoder[j](x)
        return x

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        s = self.cfg.input_size
        if tuple(image.shape[1:]) != (s, s, 3):
            raise ValueError(f"expected images of shape (B, {s}, {s}, 3), got {tuple(image.shape)}")
        x, skips = self.encode(image)
        if self.gefs is not None:
            x = self.gefs(x)
        x = self.decode(x, skips)
        return self.head(x.with_data(self.norm(x.data)))


def count(density) -> torch.Tensor | float:
    """Object count of a density map (sum over the last two axes)."""
    if isinstance(density, np.ndarray):
        return density.sum(axis=(-2, -1))
    return density.sum(dim=(-2, -1))


def build_model(cfg: ModelConfig, seed: int = 0) -> GCASUNet:
    torch.manual_seed(seed)
    return GCASUNet(cfg)


def parameter_count(cfg: ModelConfig) -> int:
    """Number of trainable scalars for ``cfg``."""
    with torch.random.fork_rng():
        return sum(p.numel() for p in GCASUNet(cfg).parameters())
