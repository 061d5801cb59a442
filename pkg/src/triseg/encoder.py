"""Unified transformer encoder over the combined sequence, plus the split of
its output back into per-modality feature grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExperimentConfig
from .embedding import IMAGE_TAG, TrimodalSequence

PAD_LOGIT = -1e9


class EncoderBlock(nn.Module):
    """Pre-LN block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'."""

    def __init__(self, dim: int, num_heads: int, dropout: float):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.ln_attn = nn.LayerNorm(dim)
        self.ln_mlp = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)
        self.drop = nn.Dropout(dropout)

    def _attend(self, z: torch.Tensor, pad_mask: torch.Tensor):
        b, s, d = z.shape
        h = self.ln_attn(z)
        shape = (b, s, self.num_heads, self.head_dim)
        q = self.q_proj(h).view(shape).transpose(1, 2)
        k = self.k_proj(h).view(shape).transpose(1, 2)
        v = self.v_proj(h).view(shape).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / self.head_dim ** 0.5
        logits = logits + (~pad_mask)[:, None, None, :].to(logits.dtype) * PAD_LOGIT
        attn = torch.softmax(logits, dim=-1)
        return (attn @ v).transpose(1, 2).reshape(b, s, d), attn

    def attention_weights(self, z: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """(B, heads, S, S) softmax rows; PAD keys get a -1e9 logit added."""
        return self._attend(z, pad_mask)[1]

    def forward(self, z: torch.Tensor, pad_mask: torch.Tensor,
                need_attn: bool = False):
        mixed, attn = self._attend(z, pad_mask)
        z = z + self.drop(self.out_proj(mixed))
        z = z + self.drop(self.fc2(F.gelu(self.fc1(self.ln_mlp(z)))))
        return (z, attn if need_attn else None)


class TrimodalEncoder(nn.Module):
    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderBlock(config.embed_dim, config.num_heads, config.dropout)
            for _ in range(config.num_blocks)
        )
        self.final_norm = nn.LayerNorm(config.embed_dim)

    def forward(self, z: torch.Tensor, pad_mask: torch.Tensor,
                need_attn: bool = False):
        """(B, S, d) -> (B, S, d) after D blocks + final LN; optionally the
        per-block attention tensors."""
        attns = [] if need_attn else None
        for index, block in enumerate(self.blocks):
            z, attn = block(z, pad_mask, need_attn)
            if not torch.isfinite(z).all():
                raise FloatingPointError(f"non-finite activations in encoder block {index}")
            if need_attn:
                attns.append(attn)
        return self.final_norm(z), attns


@dataclass
class EncodedFeatures:
    """Encoder output split by modality: F_I grid, per-candidate F_M grids
    (exact zeros outside each mask's patch-aligned bbox), language tokens."""
    image: torch.Tensor | None       # (H', W', d)
    masks: torch.Tensor | None       # (K, H', W', d)
    language: torch.Tensor           # (T, d)


def collate_sequences(seqs: list[TrimodalSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad variable-length sequences into (B, S_max, d) plus the attention
    pad mask (True = real token)."""
    s_max = max(seq.tokens.shape[0] for seq in seqs)
    d = seqs[0].tokens.shape[1]
    z = seqs[0].tokens.new_zeros((len(seqs), s_max, d))
    pad = torch.zeros((len(seqs), s_max), dtype=torch.bool)
    for i, seq in enumerate(seqs):
        s = seq.tokens.shape[0]
        z[i, :s] = seq.tokens
        pad[i, :s] = seq.pad_mask
    return z, pad


def split_encoded(tokens: torch.Tensor, seq: TrimodalSequence,
                  grid: tuple[int, int], num_candidates: int) -> EncodedFeatures:
    """Scatter one sample's encoder output back into modality grids."""
    n_mask, n_image, n_text = seq.lengths
    h_grid, w_grid = grid
    d = tokens.shape[1]

    masks = None
    if num_candidates and n_mask:
        masks = tokens.new_zeros((num_candidates, h_grid, w_grid, d))
        meta = seq.mask_token_index
        masks[meta[:, 0], meta[:, 1], meta[:, 2]] = tokens[:n_mask]
    image = None
    if n_image:
        image = tokens[n_mask:n_mask + n_image].reshape(h_grid, w_grid, d)
    language = tokens[n_mask + n_image:n_mask + n_image + n_text]
    return EncodedFeatures(image=image, masks=masks, language=language)


def attention_maps(encoder: TrimodalEncoder, seq: TrimodalSequence,
                   grid: tuple[int, int],
                   query_location: tuple[int, int]) -> list[np.ndarray]:
    """Per-block head-averaged attention from the image token at
    query_location to all image tokens, reshaped to the image grid.

    Each map is non-negative and sums to <= 1 (attention mass spent on mask
    and language tokens is excluded).
    """
    h_grid, w_grid = grid
    row, col = query_location
    if not (0 <= row < h_grid and 0 <= col < w_grid):
        raise ValueError(f"query {query_location} outside {grid} image grid")
    image_positions = np.flatnonzero(seq.modality_tags == IMAGE_TAG)
    if image_positions.size != h_grid * w_grid:
        raise ValueError("sequence has no full image block to query")
    query_index = int(image_positions[row * w_grid + col])

    with torch.no_grad():
        z = seq.tokens[None]
        pad = seq.pad_mask[None]
        maps = []
        for block in encoder.blocks:
            z, attn = block(z, pad, need_attn=True)
            head_avg = attn[0].mean(dim=0)
            row_weights = head_avg[query_index, image_positions]
            maps.append(row_weights.reshape(h_grid, w_grid).numpy())
    return maps
