"""Candidate scoring, mask-feature selection/pooling, and assembly of the
fused decoder input (channel-reduced features + coordinate map)."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExperimentConfig


class MaskScorer(nn.Module):
    """Two-layer MLP d -> d -> 1 producing one relevance score per candidate."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, 1)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        """(K, d) pooled vectors -> (K,) scores."""
        return self.fc2(F.gelu(self.fc1(pooled))).squeeze(-1)


class ChannelReducers(nn.Module):
    """Independent 1x1 convolutions reducing image and mask channels by r."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        d, r = config.embed_dim, config.channel_reduce
        dec = set(config.decoder_modalities)
        self.image_reduce = nn.Conv2d(d, d // r, kernel_size=1) if "image" in dec else None
        self.mask_reduce = nn.Conv2d(d, d // r, kernel_size=1) if "mask" in dec else None


def pool_aligned_features(feature_grid: torch.Tensor, coverage: torch.Tensor) -> torch.Tensor:
    """Coverage-weighted mean of the image feature grid over a mask's area.

    The pixel mask lives at full resolution while features live on the patch
    grid, so each cell is weighted by the fraction of its pixels the mask
    covers instead of thresholding.
    """
    total = coverage.sum()
    if total <= 0:
        raise ValueError("mask has zero coverage")
    return (feature_grid * coverage[..., None]).sum(dim=(0, 1)) / total


def pool_mask_feature(mask_grid: torch.Tensor, valid_cells: torch.Tensor) -> torch.Tensor:
    """Mean of one candidate's feature grid over its valid bbox cells."""
    count = int(valid_cells.sum())
    if count == 0:
        raise ValueError("candidate has no valid cells")
    return mask_grid[valid_cells].sum(dim=0) / count


def score_masks(scorer: MaskScorer, score_source: str,
                image_grid: torch.Tensor | None,
                mask_grids: torch.Tensor,
                coverage: torch.Tensor,
                valid_cells: torch.Tensor) -> torch.Tensor:
    """(K,) scores, pooled either from image features over each mask's area
    or from each candidate's own feature grid."""
    k = mask_grids.shape[0] if score_source == "mask_feature" else coverage.shape[0]
    if k == 0:
        raise ValueError("score_masks: no candidates")
    if score_source == "aligned_image":
        if image_grid is None:
            raise ValueError("aligned_image scoring requires image features")
        pooled = torch.stack([
            pool_aligned_features(image_grid, coverage[i]) for i in range(k)
        ])
    elif score_source == "mask_feature":
        pooled = torch.stack([
            pool_mask_feature(mask_grids[i], valid_cells[i]) for i in range(k)
        ])
    else:
        raise ValueError(f"unknown score_source {score_source!r}")
    return scorer(pooled)


def select_index(scores: torch.Tensor) -> int:
    """argmax with ties broken by the lowest index."""
    return int(np.argmax(scores.detach().cpu().numpy()))


def selection_loss(scores: torch.Tensor, target_index: int | None) -> torch.Tensor:
    """Contrastive score loss: negative log-softmax at the supervision index.

    A sample whose referent candidate was dropped has no correct target and
    contributes zero.
    """
    if target_index is None:
        return scores.sum() * 0.0
    k = scores.shape[0]
    if not 0 <= target_index < k:
        raise IndexError(f"target index {target_index} out of range for {k} candidates")
    return -F.log_softmax(scores, dim=0)[target_index]


def combine_mask_features(mask_grids: torch.Tensor, scores: torch.Tensor,
                          strategy: str) -> torch.Tensor:
    """(K, H', W', d) -> (H', W', d) by the configured strategy."""
    if mask_grids.shape[0] == 0:
        raise ValueError("combine_mask_features: no candidates")
    if strategy == "adaptive":
        return mask_grids[select_index(scores)]
    if strategy == "mean":
        return mask_grids.mean(dim=0)
    if strategy == "maximum":
        return mask_grids.max(dim=0).values
    if strategy == "weighted_sum":
        weights = torch.softmax(scores, dim=0)
        return (mask_grids * weights[:, None, None, None]).sum(dim=0)
    raise ValueError(f"unknown selection strategy {strategy!r}")


def coordinate_map(h_grid: int, w_grid: int, dtype=torch.float32,
                   device=None) -> torch.Tensor:
    """(H', W', 2) grid of normalized (row, col) positions in [-1, 1]
    (a single row or column maps to 0)."""

    def axis(n: int) -> torch.Tensor:
        if n == 1:
            return torch.zeros(1, dtype=dtype, device=device)
        return torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)

    rows = axis(h_grid)[:, None].expand(h_grid, w_grid)
    cols = axis(w_grid)[None, :].expand(h_grid, w_grid)
    return torch.stack([rows, cols], dim=-1)


def fused_channels(config: ExperimentConfig) -> int:
    per = config.embed_dim // config.channel_reduce
    return per * len(config.decoder_modalities) + 2


def assemble_decoder_input(image_grid: torch.Tensor | None,
                           combined_mask: torch.Tensor | None,
                           reducers: ChannelReducers,
                           config: ExperimentConfig) -> torch.Tensor:
    """Fused decoder input, channels-first (C, H', W') with channel order
    [reduced image (if configured); reduced mask (if configured); coords]."""
    dec = set(config.decoder_modalities)
    parts = []
    ref = None
    if "image" in dec:
        if image_grid is None:
            raise ValueError("decoder expects image features but the encoder produced none")
        ref = image_grid
        parts.append(reducers.image_reduce(image_grid.permute(2, 0, 1)[None])[0])
    if "mask" in dec:
        if combined_mask is None:
            raise ValueError("decoder expects mask features but the encoder produced none")
        ref = combined_mask
        parts.append(reducers.mask_reduce(combined_mask.permute(2, 0, 1)[None])[0])
    h_grid, w_grid = ref.shape[0], ref.shape[1]
    coords = coordinate_map(h_grid, w_grid, dtype=ref.dtype, device=ref.device)
    parts.append(coords.permute(2, 0, 1))
    return torch.cat(parts, dim=0)
