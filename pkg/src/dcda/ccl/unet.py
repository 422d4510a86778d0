"""U-Net with a residual (ResNet basic-block) encoder and a two-class head."""
from __future__ import annotations

import enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..types import ImageBatch, ProbMap, normalize_probs


class Role(enum.Enum):
    SOURCE_EXPERT = "F^S"
    TARGET_EXPERT = "F^T"


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.skip = None
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + (x if self.skip is None else self.skip(x)))


class UpBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch + skip_ch, out_ch, 3, 1, 1, bias=False), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
        )

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


class SegModel(nn.Module):
    """Maps an ImageBatch to a two-class ProbMap of the same spatial size.

    ``encoder_depth`` stride-2 residual stages give a downsampling factor of
    ``2 ** encoder_depth``; input sizes must be divisible by it.
    """

    def __init__(self, role: Role = Role.SOURCE_EXPERT, encoder_depth: int = 4, base_channels: int = 16,
                 in_ch: int = 1, num_classes: int = 2):
        super().__init__()
        self.role = role
        self.encoder_depth = encoder_depth
        self.base_channels = base_channels
        widths = [base_channels * 2 ** min(i, 3) for i in range(encoder_depth + 1)]
        self.stem = BasicBlock(in_ch, widths[0])
        self.down = nn.ModuleList(BasicBlock(widths[i], widths[i + 1], stride=2) for i in range(encoder_depth))
        self.up = nn.ModuleList(
            UpBlock(widths[i + 1], widths[i], widths[i])
            for i in reversed(range(encoder_depth))
        )
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    def logits(self, pixels: torch.Tensor) -> torch.Tensor:
        skips = [self.stem(pixels)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = skips.pop()
        for block in self.up:
            h = block(h, skips.pop())
        return self.head(h)

    def forward(self, batch) -> ProbMap:
        pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
        return normalize_probs(self.logits(pixels))
