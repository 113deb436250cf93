"""Patch embedding, position embedding, JCAT blocks and the five-stage encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import (CBAM, FFN, BasicBlock, Conv2d, LayerNorm, Module, ModuleList, Parameter,
                 SRAttention, to_map, to_tokens, trunc_normal)
from .tensor import ShapeError, Tensor


@dataclass
class FeaturePyramid:
    """Encoder outputs. ``full`` is the full-resolution ResNet feature (conv2),
    ``f1`` .. ``f5`` sit at 1/2 .. 1/32 of the input size."""

    full: Tensor
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    f5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4, self.f5]


def interp_grid(h0: int, w0: int, h: int, w: int) -> np.ndarray:
    """Corner-aligned sample positions (row, col) of an h x w grid in h0 x w0 space."""
    rs = np.arange(h) * ((h0 - 1) / (h - 1)) if h > 1 else np.zeros(1)
    cs = np.arange(w) * ((w0 - 1) / (w - 1)) if w > 1 else np.zeros(1)
    rr, cc = np.meshgrid(rs, cs, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=-1)


class PositionEmbedding(Module):
    """Learned (C, h0, w0) table, bilinearly resized when the token grid differs."""

    def __init__(self, c: int, h0: int, w0: int, rng: np.random.Generator):
        super().__init__()
        self.table = Parameter(trunc_normal(rng, (1, c, h0, w0)).astype(T.get_default_dtype()))

    def resized(self, h: int, w: int) -> Tensor:
        _, c, h0, w0 = self.table.shape
        if (h, w) == (h0, w0):
            return to_tokens(self.table)
        coords = Tensor(interp_grid(h0, w0, h, w)[None], dtype=self.table.dtype)
        return T.bilinear_sample(self.table, coords).transpose(0, 2, 1)  # 1, N, C

    def forward(self, tokens: Tensor, h: int, w: int) -> Tensor:
        return tokens + self.resized(h, w)


class PatchEmbed(Module):
    """3x3 stride-2 conv halving H and W, then per-token layer norm."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, ln_eps: float = 1e-5):
        super().__init__()
        self.proj = Conv2d(c_in, c_out, 3, rng, stride=2)
        self.norm = LayerNorm(c_out, ln_eps)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[2] % 2 or f.shape[3] % 2:
            raise ShapeError(f"patch_embed needs even spatial size, got {f.shape[2:]}")
        y = self.proj(f)
        h, w = y.shape[2:]
        return to_map(self.norm(to_tokens(y)), h, w)


class ConvAttentionPath(Module):
    """BasicBlock followed by channel then spatial attention."""

    def __init__(self, c: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.block = BasicBlock(c, c, rng, bn_momentum=cfg.bn_momentum)
        self.cbam = CBAM(c, rng, cfg.cbam_reduction, cfg.cbam_min_hidden, cfg.cbam_kernel)

    def forward(self, f: Tensor) -> Tensor:
        return self.cbam(self.block(f))


class TransformerPath(Module):
    """Pre-norm residual SRA + FFN on the flattened feature map."""

    def __init__(self, c: int, heads: int, sr: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(c, cfg.ln_eps)
        self.attn = SRAttention(c, heads, sr, rng, cfg.ln_eps)
        self.norm2 = LayerNorm(c, cfg.ln_eps)
        self.ffn = FFN(c, cfg.ffn_expansion, rng)

    def forward(self, f: Tensor) -> Tensor:
        h, w = f.shape[2:]
        t = to_tokens(f)
        t = t + self.attn(self.norm1(t), h, w)
        t = t + self.ffn(self.norm2(t))
        return to_map(t, h, w)


class JCATBlock(Module):
    """Convolutional attention and Transformer paths, joined either in
    parallel (concat + 3x3 fusion conv) or in cascade (conv path feeds the
    Transformer path)."""

    def __init__(self, c: int, heads: int, sr: int, cfg: ModelConfig, rng: np.random.Generator,
                 variant: str | None = None):
        super().__init__()
        self.variant = variant or cfg.variant
        self.conv_path = ConvAttentionPath(c, cfg, rng)
        self.trans_path = TransformerPath(c, heads, sr, cfg, rng)
        if self.variant == "parallel":
            self.fuse = Conv2d(2 * c, c, 3, rng)

    def forward(self, f: Tensor) -> Tensor:
        if self.variant == "parallel":
            both = T.concat([self.conv_path(f), self.trans_path(f)], axis=1)
            return self.fuse(both)
        return self.trans_path(self.conv_path(f))


class JCATStage(Module):
    def __init__(self, c_in: int, c: int, depth: int, heads: int, sr: int, grid: tuple,
                 cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.embed = PatchEmbed(c_in, c, rng, cfg.ln_eps)
        self.pos = PositionEmbedding(c, grid[0], grid[1], rng)
        self.blocks = ModuleList(JCATBlock(c, heads, sr, cfg, rng) for _ in range(depth))

    def forward(self, f: Tensor) -> Tensor:
        y = self.embed(f)
        h, w = y.shape[2:]
        y = to_map(self.pos(to_tokens(y), h, w), h, w)
        for blk in self.blocks:
            y = blk(y)
        return y


class Encoder(Module):
    """ResNet stage at full and half resolution, then four JCAT stages."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        m = cfg.bn_momentum
        self.stem = ModuleList(BasicBlock(cfg.stem_channels, cfg.stem_channels, rng, 1, m)
                               for _ in range(cfg.stem_blocks))
        half = [BasicBlock(cfg.stem_channels, cfg.f1_channels, rng, 2, m)]
        half += [BasicBlock(cfg.f1_channels, cfg.f1_channels, rng, 1, m)
                 for _ in range(cfg.f1_blocks - 1)]
        self.half = ModuleList(half)
        c_prev = cfg.f1_channels
        stages = []
        for i in range(4):
            scale = 2 ** (i + 2)
            grid = (cfg.pos_grid[0] // scale, cfg.pos_grid[1] // scale)
            stages.append(JCATStage(c_prev, cfg.channels[i], cfg.depths[i], cfg.num_heads[i],
                                    cfg.sr_ratios[i], grid, cfg, rng))
            c_prev = cfg.channels[i]
        self.stages = ModuleList(stages)

    def forward(self, embedded: Tensor) -> FeaturePyramid:
        H, W = embedded.shape[2:]
        if H % 32 or W % 32:
            raise ShapeError(f"encoder input must be a multiple of 32, got {H}x{W}")
        x = embedded
        for blk in self.stem:
            x = blk(x)
        full = x
        for blk in self.half:
            x = blk(x)
        feats = [x]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return FeaturePyramid(full, *feats)
