"""Pre-norm transformer encoder blocks shared by the text encoder and the
attention fusion module.

Attention supports an additive per-head bias (used for relative position
bias) and a key padding mask. Masked keys receive -inf logits, so their
values can never leak into unmasked outputs.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, key_mask: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
        """x: (B, S, D).  key_mask: (B, S) bool, True = attend. bias: (H, S, S)."""
        b, s, _ = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, H, S, hd)

        logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if bias is not None:
            logits = logits + bias[None]
        if key_mask is not None:
            neg = torch.finfo(logits.dtype).min
            logits = logits.masked_fill(~key_mask[:, None, None, :], neg)
        attn = torch.softmax(logits, dim=-1)
        out = torch.matmul(attn, v)  # (B, H, S, hd)
        out = out.transpose(1, 2).reshape(b, s, self.dim)
        return self.out(out)


class EncoderLayer(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x)). GELU MLP, 4x."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: Tensor, key_mask: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask=key_mask, bias=bias)
        x = x + self.mlp(self.norm2(x))
        return x
