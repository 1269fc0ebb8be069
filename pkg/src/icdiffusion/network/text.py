"""Toy text encoder: learned token embeddings plus self-attention layers.

Replaces a pretrained text tower at desk scale. Dropped text (None) maps to a
distinguished all-zero embedding so the same null signal serves both training
dropout and the unconditional guidance branch.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..vocab import MAX_TOKENS, PAD_ID, VOCAB_SIZE, tokenize


class SelfAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim * 4), nn.SiLU(), nn.Linear(dim * 4, dim))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        h = self.norm1(x)
        q, k, v = self.qkv(h).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = q @ k.transpose(-1, -2) / (D // self.heads) ** 0.5
        attn = attn.masked_fill(~mask[:, None, None, :], float("-inf"))
        h = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, L, D)
        x = x + self.proj(h)
        return x + self.ff(self.norm2(x))


class TextEncoder(nn.Module):
    """Encode captions into (B, L, d_text) sequences with a validity mask."""

    def __init__(self, d_text: int = 64, layers: int = 2, heads: int = 4, max_len: int = MAX_TOKENS):
        super().__init__()
        self.d_text = d_text
        self.max_len = max_len
        self.token_emb = nn.Embedding(VOCAB_SIZE, d_text, padding_idx=PAD_ID)
        self.pos_emb = nn.Parameter(torch.zeros(max_len, d_text))
        self.layers = nn.ModuleList(SelfAttentionLayer(d_text, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(d_text)
        nn.init.normal_(self.pos_emb, std=0.02)

    @property
    def device(self) -> torch.device:
        return self.token_emb.weight.device

    @property
    def dtype(self) -> torch.dtype:
        return self.token_emb.weight.dtype

    def null_embedding(self, batch: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
        """The dropped-text embedding: a single all-zero position, exactly."""
        emb = torch.zeros(batch, 1, self.d_text, device=self.device, dtype=self.dtype)
        mask = torch.ones(batch, 1, dtype=torch.bool, device=self.device)
        return emb, mask

    def forward(self, captions: list[str | None]) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch of captions; None entries get the null embedding.

        Returns (embeddings (B, L, d_text), mask (B, L)). Padding positions
        are masked out of every attention; a batch of only-None captions
        returns exact zeros without touching any weights.
        """
        if all(c is None for c in captions):
            return self.null_embedding(len(captions))
        ids = torch.full((len(captions), self.max_len), PAD_ID, dtype=torch.long, device=self.device)
        mask = torch.zeros(len(captions), self.max_len, dtype=torch.bool, device=self.device)
        dropped = torch.zeros(len(captions), dtype=torch.bool, device=self.device)
        for i, cap in enumerate(captions):
            if cap is None:
                dropped[i] = True
                mask[i, 0] = True  # one attendable position, zeroed below
                continue
            toks = tokenize(cap)
            ids[i, : len(toks)] = torch.tensor(toks, dtype=torch.long, device=self.device)
            mask[i, : len(toks)] = True
        x = self.token_emb(ids) + self.pos_emb[None, :, :].to(self.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        x = self.norm(x)
        x = x * mask[:, :, None]
        # dropped entries carry the exact null embedding regardless of weights
        x = torch.where(dropped[:, None, None], torch.zeros_like(x), x)
        return x, mask


def encode_text(encoder: TextEncoder, caption: str | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-caption convenience wrapper around TextEncoder.forward."""
    return encoder([caption])
