"""Convolutional backbone producing the multi-level maps F2..F5.

A two-conv stride-4 stem feeds four residual stages; stage k outputs F_{k+1}
at stride 2^{k+1}. GroupNorm keeps the statistics batch-independent, which
makes training deterministic and lets the gradient checks run at batch 1.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

FEATURE_LEVELS = (2, 3, 4, 5)
STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


def _gn(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = _gn(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _gn(out_ch)
        self.relu = nn.ReLU()
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride), _gn(out_ch))
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        y = self.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.relu(y + self.skip(x))


class ImageEncoder(nn.Module):
    """4-stage residual backbone over normalized (B, 3, H, W) images.

    H and W must be divisible by 32. Returns {level: (B, C_level, H/s, W/s)}
    for levels 2..5 with strides 4/8/16/32.
    """

    def __init__(self, channels: tuple[int, int, int, int] = (16, 32, 64, 128), blocks_per_stage: int = 2):
        super().__init__()
        self.channels = dict(zip(FEATURE_LEVELS, channels))
        c2 = channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(3, c2, 3, stride=2, padding=1),
            _gn(c2),
            nn.ReLU(),
            nn.Conv2d(c2, c2, 3, stride=2, padding=1),
            _gn(c2),
            nn.ReLU(),
        )
        stages = []
        in_ch = c2
        for i, out_ch in enumerate(channels):
            stride = 1 if i == 0 else 2
            blocks = [ResidualBlock(in_ch, out_ch, stride=stride)]
            blocks += [ResidualBlock(out_ch, out_ch) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

    def forward(self, image: Tensor) -> dict[int, Tensor]:
        if image.dim() == 3:
            image = image[None]
        _, c, h, w = image.shape
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        if h % 32 or w % 32:
            raise ValueError(f"image size ({h}, {w}) must be divisible by 32")
        x = self.stem(image)
        feats: dict[int, Tensor] = {}
        for level, stage in zip(FEATURE_LEVELS, self.stages):
            x = stage(x)
            feats[level] = x
        return feats
