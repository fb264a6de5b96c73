"""Hierarchical nested-transformer encoder with a U-Net style decoder.

Data flow for the default config (96^3 crop, 4^3 patches)::

    crop (B, 1, 96, 96, 96)
      -> patch embed              (B, E0, 24, 24, 24)   64 blocks of 6^3 tokens
      -> aggregate                (B, E1, 12, 12, 12)    8 blocks of 6^3 tokens
      -> aggregate                (B, E2,  6,  6,  6)    1 block  of 6^3 tokens
      -> decoder with skips       (B, 32, 96, 96, 96)
      -> heads                    133 brain logits [+ TICV logit + PFV logit]
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import BlockedSequence, blockify, deblockify
from .config import ModelConfig


def _to_last(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 4, 1)


def _to_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 4, 1, 2, 3)


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping patches plus a learned positional term."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.crop_size = cfg.crop_size
        self.patch_size = cfg.patch_size
        self.proj = nn.Conv3d(cfg.in_channels, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        grid = cfg.grid_shapes()[0]
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.embed_dim, *grid))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spatial = tuple(x.shape[2:])
        if any(s % p for s, p in zip(spatial, self.patch_size)):
            raise ValueError(f"crop {spatial} is not divisible by patch size {self.patch_size}")
        if spatial != self.crop_size:
            raise ValueError(f"crop {spatial} does not match configured crop_size {self.crop_size}")
        return self.proj(x) + self.pos_embed


class Attention(nn.Module):
    """Multi-head self-attention confined to each block of a (B, T, n, C) input."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, n, c = x.shape
        qkv = self.qkv(x).reshape(b, t, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(3, 0, 4, 1, 2, 5).unbind(0)  # each (B, heads, T, n, c/h)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        x = attn.softmax(dim=-1) @ v
        x = x.permute(0, 2, 3, 1, 4).reshape(b, t, n, c)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TransformerLayer(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Aggregation(nn.Module):
    """3^3 conv + channel LayerNorm + 2^3 max-pool; the only place blocks exchange information."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        # replicate padding keeps a constant field constant at the borders
        self.conv = nn.Conv3d(in_dim, out_dim, kernel_size=3, padding=1, padding_mode="replicate")
        self.norm = nn.LayerNorm(out_dim)
        self.pool = nn.MaxPool3d(kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if any(s % 2 for s in x.shape[2:]):
            raise ValueError(f"aggregation needs even grid extents, got {tuple(x.shape[2:])}")
        x = self.conv(x)
        x = _to_first(self.norm(_to_last(x)))
        return self.pool(x)


class NestLevel(nn.Module):
    def __init__(self, cfg: ModelConfig, level: int):
        super().__init__()
        self.level = level
        self.block_grid = cfg.block_grid[level]
        dim = cfg.embed_dims[level]
        self.layers = nn.ModuleList(
            TransformerLayer(dim, cfg.num_heads[level], cfg.mlp_ratio) for _ in range(cfg.depths[level])
        )

    def blockify(self, x: torch.Tensor) -> BlockedSequence:
        return blockify(_to_last(x), self.block_grid, self.level)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, BlockedSequence]:
        seq = self.blockify(x)
        data = seq.data
        for layer in self.layers:
            data = layer(data)
        seq = seq.with_data(data)
        return _to_first(deblockify(seq)), seq


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm = nn.InstanceNorm3d(out_ch, affine=True)
        self.act = nn.LeakyReLU(0.01)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


@dataclass
class HierarchyFeatures:
    stem: torch.Tensor | None
    levels: list[torch.Tensor | None]
    blocked: list[BlockedSequence] | None = None

    def check(self):
        if self.stem is None:
            raise ValueError("hierarchy features are missing the stem feature map")
        if len(self.levels) != 3 or any(f is None for f in self.levels):
            missing = [i for i, f in enumerate(self.levels) if f is None]
            raise ValueError(f"hierarchy features incomplete, missing levels {missing or 'beyond ' + str(len(self.levels))}")
        for lvl in range(2):
            hi, lo = self.levels[lvl].shape[2:], self.levels[lvl + 1].shape[2:]
            if any(h != 2 * l for h, l in zip(hi, lo)):
                raise ValueError(f"level {lvl + 1} grid {tuple(lo)} is not half of level {lvl} grid {tuple(hi)}")


@dataclass
class ModelOutput:
    brain_logits: torch.Tensor
    ticv_logit: torch.Tensor | None = None
    pfv_logit: torch.Tensor | None = None

    @property
    def has_icv(self) -> bool:
        return self.ticv_logit is not None and self.pfv_logit is not None

    def stacked(self) -> torch.Tensor:
        """All channels concatenated: 133 brain logits followed by TICV and PFV."""
        parts = [self.brain_logits]
        if self.has_icv:
            parts += [self.ticv_logit, self.pfv_logit]
        return torch.cat(parts, dim=1)


class UNesT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        e0, e1, e2 = cfg.embed_dims
        d2, d1, d0 = cfg.decoder_channels

        self.stem = ConvBlock(cfg.in_channels, cfg.stem_channels)
        self.patch_embed = PatchEmbed(cfg)
        self.levels = nn.ModuleList(NestLevel(cfg, lvl) for lvl in range(3))
        self.aggregate = nn.ModuleList([Aggregation(e0, e1), Aggregation(e1, e2)])

        self.up2 = nn.ConvTranspose3d(e2, e1, kernel_size=2, stride=2)
        self.dec2 = ConvBlock(2 * e1, d2)
        self.up1 = nn.ConvTranspose3d(d2, e0, kernel_size=2, stride=2)
        self.dec1 = ConvBlock(2 * e0, d1)
        self.up0 = nn.ConvTranspose3d(d1, d1, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.dec0 = ConvBlock(d1 + cfg.stem_channels, d0)

        self.brain_head = nn.Conv3d(d0, cfg.num_classes, kernel_size=1)
        if cfg.icv_heads_enabled:
            self.ticv_head = nn.Conv3d(d0, 1, kernel_size=1)
            self.pfv_head = nn.Conv3d(d0, 1, kernel_size=1)
            init_icv_heads(self)
        else:
            self.ticv_head = None
            self.pfv_head = None

    def check_input(self, x: torch.Tensor):
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W, D) input, got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != self.cfg.crop_size:
            raise ValueError(f"crop {tuple(x.shape[2:])} does not match configured crop_size {self.cfg.crop_size}")

    def encode(self, x: torch.Tensor) -> HierarchyFeatures:
        self.check_input(x)
        stem = self.stem(x)
        feat = self.patch_embed(x)
        levels, blocked = [], []
        for lvl, level in enumerate(self.levels):
            if lvl > 0:
                feat = self.aggregate[lvl - 1](feat)
            feat, seq = level(feat)
            levels.append(feat)
            blocked.append(seq)
        return HierarchyFeatures(stem, levels, blocked)

    def decode(self, feats: HierarchyFeatures) -> torch.Tensor:
        feats.check()
        f0, f1, f2 = feats.levels
        x = self.dec2(torch.cat([self.up2(f2), f1], dim=1))
        x = self.dec1(torch.cat([self.up1(x), f0], dim=1))
        x = self.dec0(torch.cat([self.up0(x), feats.stem], dim=1))
        return x

    def forward(self, x: torch.Tensor, finetune_mode: bool | None = None) -> ModelOutput:
        if finetune_mode is None:
            finetune_mode = self.cfg.icv_heads_enabled
        if finetune_mode and not self.cfg.icv_heads_enabled:
            raise ValueError("finetune mode requested but this model has no TICV/PFV heads")
        x = self.decode(self.encode(x))
        out = ModelOutput(self.brain_head(x))
        if finetune_mode:
            out.ticv_logit = self.ticv_head(x)
            out.pfv_logit = self.pfv_head(x)
        return out


def init_icv_heads(model: UNesT, generator: torch.Generator | None = None):
    """Truncated-normal weights and zero bias, so both sigmoids start near 0.5."""
    for head in (model.ticv_head, model.pfv_head):
        with torch.no_grad():
            w = torch.empty_like(head.weight)
            nn.init.trunc_normal_(w, std=0.02, a=-0.04, b=0.04, generator=generator)
            head.weight.copy_(w)
            head.bias.zero_()


def build_model(cfg: ModelConfig, seed: int | None = None, dtype: torch.dtype = torch.float32) -> UNesT:
    if seed is not None:
        torch.manual_seed(seed)
    return UNesT(cfg).to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def softmax_probs(out: ModelOutput) -> torch.Tensor:
    return F.softmax(out.brain_logits, dim=1)
