"""Progressive upsampling head: log2(P) blocks of conv + batch norm + ReLU +
2x bilinear upsampling, then a 1x1 convolution to single-channel logits."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class SegmentationHead(nn.Module):
    """Maps (B, C, H', W') to full-resolution logits (B, H, W).

    Channel width stays at C through every block; upsampling uses
    align_corners=False semantics (output pixel center sampled at input
    coordinate (o + 0.5) / 2 - 0.5, clamped at the borders).
    """

    def __init__(self, channels: int, num_blocks: int):
        super().__init__()
        self.channels = channels
        self.blocks = nn.ModuleList(
            nn.Sequential(
                # replicate padding keeps a constant field constant through the conv
                nn.Conv2d(channels, channels, kernel_size=3, padding=1,
                          padding_mode="replicate"),
                nn.BatchNorm2d(channels, momentum=0.1),
                nn.ReLU(),
            )
            for _ in range(num_blocks)
        )
        self.final = nn.Conv2d(channels, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} input channels, got {x.shape[1]}")
        for block in self.blocks:
            x = F.interpolate(block(x), scale_factor=2, mode="bilinear",
                              align_corners=False)
        logits = self.final(x).squeeze(1)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite logits in segmentation head")
        return logits


def binarize(logits: np.ndarray | torch.Tensor) -> np.ndarray:
    """sigmoid(logit) > 0.5, i.e. logit strictly greater than 0."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    return logits > 0.0
