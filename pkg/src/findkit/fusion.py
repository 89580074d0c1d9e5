"""Multi-level image-text fusion and the feature pyramid that merges it.

Each backbone level is fused with the query tokens by one of three
mechanisms: broadcast product against a pooled text vector, channel
concatenation against the same pooled vector, or self-attention over the
flattened vision sequence concatenated (vision first) with the text tokens.
Attention is reserved for the small deep levels; the big shallow maps use
the cheap product path. A top-down pyramid then equalizes all levels to the
shared fusion width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .transformer import EncoderLayer

MECHANISMS = ("product", "attention", "concat")
LEVELS = (2, 3, 4, 5)


@dataclass(frozen=True)
class FusionConfig:
    """Shared fusion width, attention depth, and per-level mechanism."""

    dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mechanisms: tuple[tuple[int, str], ...] = ((2, "product"), (3, "product"), (4, "attention"), (5, "attention"))

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError(f"fusion dim {self.dim} not divisible by {self.num_heads} heads")
        levels = tuple(lv for lv, _ in self.mechanisms)
        if levels != LEVELS:
            raise ValueError(f"mechanisms must cover levels {LEVELS}, got {levels}")
        for lv, mech in self.mechanisms:
            if mech not in MECHANISMS:
                raise ValueError(f"unknown fusion mechanism {mech!r} at level {lv}")

    @property
    def mechanism_by_level(self) -> dict[int, str]:
        return dict(self.mechanisms)

    @property
    def attention_levels(self) -> tuple[int, ...]:
        return tuple(lv for lv, m in self.mechanisms if m == "attention")

    @classmethod
    def make(cls, dim=64, num_layers=2, num_heads=4, deep_levels=(4, 5), deep_mechanism="attention"):
        """Default layout: product at the shallow levels, deep_mechanism at deep_levels."""
        mechs = tuple(
            (lv, deep_mechanism if lv in deep_levels else "product") for lv in LEVELS
        )
        return cls(dim=dim, num_layers=num_layers, num_heads=num_heads, mechanisms=mechs)


def _check_text(mask: Tensor) -> None:
    if (mask.sum(dim=-1) == 0).any():
        raise ValueError("empty query: all text tokens are masked")


def masked_mean(text: Tensor, mask: Tensor) -> Tensor:
    """(B, T, D) tokens -> (B, D) mean over unmasked positions."""
    m = mask.to(text.dtype)[..., None]
    return (text * m).sum(dim=1) / m.sum(dim=1)


class ProductFusion(nn.Module):
    """Pooled text vector broadcast-multiplied into the projected vision map."""

    def __init__(self, in_channels: int, text_dim: int, dim: int):
        super().__init__()
        self.vis_proj = nn.Conv2d(in_channels, dim, 1)
        self.text_proj = nn.Linear(text_dim, dim)
        self.out = nn.Conv2d(dim, dim, 1)

    def forward(self, vision: Tensor, text: Tensor, mask: Tensor) -> Tensor:
        _check_text(mask)
        v = self.vis_proj(vision)
        t = masked_mean(self.text_proj(text), mask)
        return self.out(v * t[:, :, None, None])


class ConcatFusion(nn.Module):
    """Pooled text vector channel-concatenated, then mixed by a 1x1 conv."""

    def __init__(self, in_channels: int, text_dim: int, dim: int):
        super().__init__()
        self.vis_proj = nn.Conv2d(in_channels, dim, 1)
        self.text_proj = nn.Linear(text_dim, dim)
        self.out = nn.Conv2d(2 * dim, dim, 1)

    def forward(self, vision: Tensor, text: Tensor, mask: Tensor) -> Tensor:
        _check_text(mask)
        v = self.vis_proj(vision)
        t = masked_mean(self.text_proj(text), mask)
        t = t[:, :, None, None].expand(-1, -1, v.shape[2], v.shape[3])
        return self.out(torch.cat([v, t], dim=1))


class RelativeBias(nn.Module):
    """Learned per-head attention bias over bucketed 1-D sequence offsets.

    Offsets are log-bucketed: small distances get exact buckets, larger ones
    share logarithmically wider buckets up to max_distance, separately for
    each sign. The bias depends only on (key_pos - query_pos) and the head.
    """

    def __init__(self, num_heads: int, num_buckets: int = 32, max_distance: int = 128):
        super().__init__()
        self.num_heads = num_heads
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        self.table = nn.Embedding(num_buckets, num_heads)
        nn.init.normal_(self.table.weight, std=0.02)

    def bucket(self, relative_position: Tensor) -> Tensor:
        half = self.num_buckets // 2
        bucket = (relative_position > 0).long() * half
        n = relative_position.abs()
        max_exact = half // 2
        scale = (half - max_exact) / math.log(self.max_distance / max_exact)
        large = max_exact + (torch.log(n.clamp(min=1).float() / max_exact) * scale).long()
        large = large.clamp(max=half - 1)
        return bucket + torch.where(n < max_exact, n, large)

    def forward(self, seq_len: int) -> Tensor:
        pos = torch.arange(seq_len)
        rel = pos[None, :] - pos[:, None]  # key - query
        bias = self.table(self.bucket(rel))  # (S, S, H)
        return bias.permute(2, 0, 1)


class AttentionFusion(nn.Module):
    """Self-attention over [vision sequence; text tokens] with relative bias.

    The spatial map is flattened row-major, concatenated in front of the
    text tokens, run through pre-norm encoder layers (text padding masked
    out as keys, bias added in every layer), then the first H*W outputs are
    reshaped back to the map.
    """

    def __init__(self, in_channels: int, text_dim: int, dim: int, num_layers: int, num_heads: int):
        super().__init__()
        self.vis_proj = nn.Conv2d(in_channels, dim, 1)
        self.text_proj = nn.Linear(text_dim, dim)
        self.bias = RelativeBias(num_heads)
        self.layers = nn.ModuleList(EncoderLayer(dim, num_heads) for _ in range(num_layers))

    def forward(self, vision: Tensor, text: Tensor, mask: Tensor) -> Tensor:
        _check_text(mask)
        b, _, h, w = vision.shape
        v = self.vis_proj(vision).flatten(2).transpose(1, 2)  # (B, HW, D)
        t = self.text_proj(text)
        x = torch.cat([v, t], dim=1)

        seq_len = x.shape[1]
        key_mask = torch.cat(
            [torch.ones(b, h * w, dtype=torch.bool, device=mask.device), mask], dim=1
        )
        bias = self.bias(seq_len).to(x.dtype)
        for layer in self.layers:
            x = layer(x, key_mask=key_mask, bias=bias)
        fused = x[:, : h * w]
        return fused.transpose(1, 2).reshape(b, -1, h, w)


class PyramidMerge(nn.Module):
    """Top-down pyramid: lateral 1x1, nearest upsample + add, 3x3 smoothing.

    Lateral convs carry no bias so an all-zero input yields exactly the
    output convs' biases.
    """

    def __init__(self, dim: int, levels=LEVELS):
        super().__init__()
        self.levels = tuple(sorted(levels))
        self.lateral = nn.ModuleDict({str(lv): nn.Conv2d(dim, dim, 1, bias=False) for lv in self.levels})
        self.output = nn.ModuleDict({str(lv): nn.Conv2d(dim, dim, 3, padding=1) for lv in self.levels})

    def forward(self, fused: dict[int, Tensor]) -> dict[int, Tensor]:
        missing = [lv for lv in self.levels if lv not in fused]
        if missing:
            raise ValueError(f"pyramid_merge missing levels {missing}")
        merged: dict[int, Tensor] = {}
        top = None
        for lv in reversed(self.levels):
            lat = self.lateral[str(lv)](fused[lv])
            if top is not None:
                lat = lat + nn.functional.interpolate(top, size=lat.shape[-2:], mode="nearest")
            top = lat
            merged[lv] = self.output[str(lv)](lat)
        return {lv: merged[lv] for lv in self.levels}


_FUSERS = {"product": ProductFusion, "concat": ConcatFusion}


class MultiLevelFusion(nn.Module):
    """Per-level fusion followed by the pyramid merge."""

    def __init__(self, config: FusionConfig, in_channels: dict[int, int], text_dim: int):
        super().__init__()
        self.config = config
        fusers = {}
        for lv, mech in config.mechanisms:
            if mech == "attention":
                fusers[str(lv)] = AttentionFusion(
                    in_channels[lv], text_dim, config.dim, config.num_layers, config.num_heads
                )
            else:
                fusers[str(lv)] = _FUSERS[mech](in_channels[lv], text_dim, config.dim)
        self.fusers = nn.ModuleDict(fusers)
        self.pyramid = PyramidMerge(config.dim)

    def fuse_level(self, level: int, vision: Tensor, text: Tensor, mask: Tensor) -> Tensor:
        return self.fusers[str(level)](vision, text, mask)

    def forward(self, feats: dict[int, Tensor], text: Tensor, mask: Tensor) -> dict[int, Tensor]:
        fused = {lv: self.fuse_level(lv, feats[lv], text, mask) for lv in LEVELS}
        return self.pyramid(fused)
