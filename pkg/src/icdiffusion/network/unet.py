"""Miniature text-conditioned U-Net denoiser with an optional control branch.

The base path is a structure-preserving miniature of a latent-diffusion
U-Net: a stride-2 input stem (standing in for the pixel-to-latent reduction),
residual blocks with timestep conditioning, text cross-attention at the
configured resolutions, and skip connections into the decoder.

The control branch is a trainable copy of the stem/encoder/middle. It
receives the denoised state plus a prompt feature map (the elementwise sum
of an example-pair encoding and a query encoding) and feeds its features
back into the base decoder through 1x1 connectors initialized to exactly
zero, so a freshly initialized branch leaves the base model untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 32
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 1
    attn_resolutions: tuple[int, ...] = (16, 8)
    heads: int = 4
    temb_dim: int = 128
    d_text: int = 64
    text_layers: int = 2
    text_heads: int = 4
    train_text_encoder: bool = True
    use_pair_encoder: bool = True  # False: query-only conditioning (single-task baseline)

    def validate(self) -> None:
        levels = len(self.channel_mult)
        if self.resolution % (2**levels):
            raise ValueError(f"resolution {self.resolution} must be divisible by {2**levels}")
        if self.num_res_blocks < 1 or levels < 1:
            raise ValueError("need at least one level and one res block")

    @property
    def level_resolutions(self) -> list[int]:
        # stride-2 stem, then one downsample between consecutive levels
        return [self.resolution // 2 // (2**i) for i in range(len(self.channel_mult))]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Pixel queries attend to text keys/values; padding masked out."""

    def __init__(self, channels: int, d_text: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.norm = _norm(channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(d_text, channels)
        self.to_v = nn.Linear(d_text, channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, text: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        dh = C // self.heads
        q = self.to_q(self.norm(x)).reshape(B, self.heads, dh, H * W)
        k = self.to_k(text).reshape(B, -1, self.heads, dh).permute(0, 2, 3, 1)  # (B, h, dh, L)
        v = self.to_v(text).reshape(B, -1, self.heads, dh).permute(0, 2, 1, 3)  # (B, h, L, dh)
        attn = q.transpose(2, 3) @ k / math.sqrt(dh)  # (B, h, HW, L)
        attn = attn.masked_fill(~mask[:, None, None, :], float("-inf"))
        h = (attn.softmax(dim=-1) @ v).transpose(2, 3).reshape(B, C, H, W)
        return x + self.proj(h)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class EncoderLevel(nn.Module):
    def __init__(self, cin: int, cout: int, resolution: int, cfg: ModelConfig, last: bool):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        ch = cin
        for _ in range(cfg.num_res_blocks):
            self.blocks.append(ResBlock(ch, cout, cfg.temb_dim))
            self.attns.append(
                CrossAttention(cout, cfg.d_text, cfg.heads) if resolution in cfg.attn_resolutions else None
            )
            ch = cout
        self.downsample = None if last else Downsample(cout)

    def forward(self, h, temb, text, mask, skips: list):
        for block, attn in zip(self.blocks, self.attns):
            h = block(h, temb)
            if attn is not None:
                h = attn(h, text, mask)
            skips.append(h)
        if self.downsample is not None:
            h = self.downsample(h)
            skips.append(h)
        return h


class MiddleBlock(nn.Module):
    def __init__(self, channels: int, resolution: int, cfg: ModelConfig):
        super().__init__()
        self.res1 = ResBlock(channels, channels, cfg.temb_dim)
        self.attn = CrossAttention(channels, cfg.d_text, cfg.heads) if resolution in cfg.attn_resolutions else None
        self.res2 = ResBlock(channels, channels, cfg.temb_dim)

    def forward(self, h, temb, text, mask):
        h = self.res1(h, temb)
        if self.attn is not None:
            h = self.attn(h, text, mask)
        return self.res2(h, temb)


class DecoderLevel(nn.Module):
    def __init__(self, skip_channels: list[int], cin: int, cout: int, resolution: int, cfg: ModelConfig, first_level: bool):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        ch = cin
        for i in range(cfg.num_res_blocks + 1):
            self.blocks.append(ResBlock(ch + skip_channels[i], cout, cfg.temb_dim))
            self.attns.append(
                CrossAttention(cout, cfg.d_text, cfg.heads) if resolution in cfg.attn_resolutions else None
            )
            ch = cout
        self.upsample = None if first_level else Upsample(cout)

    def forward(self, h, temb, text, mask, skips: list):
        for block, attn in zip(self.blocks, self.attns):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if attn is not None:
                h = attn(h, text, mask)
        if self.upsample is not None:
            h = self.upsample(h)
        return h


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        emb = timestep_embedding(t, self.dim).to(dtype)
        return self.fc2(F.silu(self.fc1(emb)))


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class StackedConvEncoder(nn.Module):
    """Stacked convolutions mapping prompt images to first-level features.

    One stride-2 stage matches the stem's downsampling, so the output can be
    added to the control stem output directly.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = max(cout // 2, 4)
        self.conv1 = nn.Conv2d(cin, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, cout, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        h = F.silu(self.conv1(x))
        h = F.silu(self.conv2(h))
        return self.conv3(h)


class UNetEncoder(nn.Module):
    """Stem + encoder levels + middle; shared structure for base and control."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        self.time_mlp = TimeEmbedding(cfg.temb_dim)
        self.stem = nn.Conv2d(3, cfg.base_channels, 3, stride=2, padding=1)
        self.levels = nn.ModuleList()
        ch = cfg.base_channels
        for i, res in enumerate(cfg.level_resolutions):
            last = i == len(chans) - 1
            self.levels.append(EncoderLevel(ch, chans[i], res, cfg, last))
            ch = chans[i]
        self.middle = MiddleBlock(ch, cfg.level_resolutions[-1], cfg)

    def forward(self, x, temb, text, mask):
        skips: list[torch.Tensor] = []
        h = self.stem(x)
        skips.append(h)
        for level in self.levels:
            h = level(h, temb, text, mask, skips)
        h = self.middle(h, temb, text, mask)
        return h, skips
