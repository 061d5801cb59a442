"""Tokenization of a sample into the combined trimodal sequence: image
patches, per-candidate valid-area mask patches, and word tokens, each with
positional and modality type embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .config import ExperimentConfig
from .data import PAD_ID, SampleRecord, Vocabulary

MASK_TAG, IMAGE_TAG, LANGUAGE_TAG = 0, 1, 2


def patchify_image(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, 3) -> (N, 3*P*P), row-major patch order, (row, col, channel)
    flattening within a patch."""
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image dims ({h}, {w}) not divisible by patch size {p}")
    grid = image.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape(h // p * (w // p), p * p * c)


def unpatchify_image(patches: np.ndarray, height: int, width: int, patch_size: int) -> np.ndarray:
    p = patch_size
    c = patches.shape[1] // (p * p)
    grid = patches.reshape(height // p, width // p, p, p, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape(height, width, c)


def aligned_bbox(mask: np.ndarray, patch_size: int) -> tuple[int, int, int, int]:
    """Tight pixel bbox expanded outward to the patch grid, as patch-grid
    coordinates (row0, row1, col0, col1), end-exclusive."""
    if not mask.any():
        raise ValueError("empty mask has no bounding box")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    p = patch_size
    return (rows[0] // p, rows[-1] // p + 1, cols[0] // p, cols[-1] // p + 1)


def mask_valid_patches(mask: np.ndarray, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Every patch inside the mask's patch-aligned bounding box (all-zero
    patches within the box included).

    Returns (coords, contents): (n, 2) grid coordinates and (n, P*P) binary
    patch vectors, n = bbox_H * bbox_W / P^2.
    """
    r0, r1, c0, c1 = aligned_bbox(mask, patch_size)
    p = patch_size
    region = mask[r0 * p:r1 * p, c0 * p:c1 * p].astype(np.float32)
    contents = patchify_image(region[..., None], p)
    rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    coords = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return coords, contents


def mask_cropped_patches(mask: np.ndarray, image: np.ndarray,
                         patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Variant with the original pixels kept inside the mask (RGB content,
    zero outside); same coordinate layout as mask_valid_patches."""
    coords, _ = mask_valid_patches(mask, patch_size)
    r0, r1, c0, c1 = aligned_bbox(mask, patch_size)
    p = patch_size
    cropped = image * mask[..., None]
    region = cropped[r0 * p:r1 * p, c0 * p:c1 * p].astype(np.float32)
    return coords, patchify_image(region, p)


def coverage_map(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Pixel mask average-pooled to the patch grid: fraction of each P x P
    cell covered, in [0, 1]."""
    h, w = mask.shape
    p = patch_size
    return mask.astype(np.float32).reshape(h // p, p, w // p, p).mean(axis=(1, 3))


@dataclass
class PreparedSample:
    """Per-sample tensors precomputed once so epochs reuse them."""
    sample_id: str
    expression: str
    image_patches: torch.Tensor          # (N, 3P^2)
    token_ids: torch.Tensor              # (T_max,) padded with PAD
    token_real: torch.Tensor             # (T_max,) bool
    mask_coords: list[torch.Tensor]      # per candidate (n_k, 2)
    mask_contents: list[torch.Tensor]    # per candidate (n_k, P^2) or (n_k, 3P^2)
    coverage: torch.Tensor               # (K, H', W') pixel coverage per candidate
    valid_cells: torch.Tensor            # (K, H', W') bool: patch-aligned bbox cells
    candidate_masks: np.ndarray          # (K, H, W) bool, full resolution
    gt_mask: np.ndarray                  # (H, W) bool
    gt_tensor: torch.Tensor              # (H, W) float32
    target_index: int | None             # argmax-IoU candidate, None if nothing overlaps
    gt_instance_index: int | None

    @property
    def num_candidates(self) -> int:
        return len(self.mask_coords)


def prepare_sample(record: SampleRecord, config: ExperimentConfig,
                   vocab: Vocabulary) -> PreparedSample:
    p = config.patch_size
    _, h_grid, w_grid, _ = _dims(config)

    ids = vocab.tokenize(record.expression)
    if not ids:
        raise ValueError(f"sample {record.sample_id}: empty expression")
    if len(ids) > config.max_text_len:
        raise ValueError(f"sample {record.sample_id}: expression longer than max_text_len")
    if max(ids) >= vocab.size:
        raise ValueError(f"sample {record.sample_id}: token id outside vocabulary")
    pad = config.max_text_len - len(ids)
    token_ids = torch.tensor(ids + [PAD_ID] * pad, dtype=torch.long)
    token_real = torch.tensor([True] * len(ids) + [False] * pad)

    rgb_content = "image" not in config.encoder_modalities
    mask_coords, mask_contents = [], []
    coverage, valid = [], []
    for k, mask in enumerate(record.candidate_masks):
        if not mask.any():
            raise ValueError(f"sample {record.sample_id}: candidate {k} has zero area")
        if rgb_content:
            coords, contents = mask_cropped_patches(mask, record.image, p)
        else:
            coords, contents = mask_valid_patches(mask, p)
        mask_coords.append(torch.from_numpy(coords.astype(np.int64)))
        mask_contents.append(torch.from_numpy(contents))
        coverage.append(coverage_map(mask, p))
        cells = np.zeros((h_grid, w_grid), dtype=bool)
        cells[coords[:, 0], coords[:, 1]] = True
        valid.append(cells)

    return PreparedSample(
        sample_id=record.sample_id,
        expression=record.expression,
        image_patches=torch.from_numpy(patchify_image(record.image, p)),
        token_ids=token_ids,
        token_real=token_real,
        mask_coords=mask_coords,
        mask_contents=mask_contents,
        coverage=torch.from_numpy(np.stack(coverage)),
        valid_cells=torch.from_numpy(np.stack(valid)),
        candidate_masks=np.stack([m.astype(bool) for m in record.candidate_masks]),
        gt_mask=record.gt_mask.astype(bool),
        gt_tensor=torch.from_numpy(record.gt_mask.astype(np.float32)),
        target_index=metrics.supervision_index(record.candidate_masks, record.gt_mask),
        gt_instance_index=record.gt_instance_index,
    )


@dataclass
class TrimodalSequence:
    """Token order is [mask-block; image-block; language-block]."""
    tokens: torch.Tensor            # (S, d)
    modality_tags: np.ndarray       # (S,) in {MASK_TAG, IMAGE_TAG, LANGUAGE_TAG}
    mask_token_index: np.ndarray    # (n_mask_tokens, 3): candidate k, row, col
    pad_mask: torch.Tensor          # (S,) bool, True = real token
    lengths: tuple[int, int, int]   # (N', N, T)


def _dims(config: ExperimentConfig):
    h_grid = config.image_height // config.patch_size
    w_grid = config.image_width // config.patch_size
    return h_grid * w_grid, h_grid, w_grid, config.patch_size


class SampleEmbedder(nn.Module):
    """Projections, tables and type embeddings producing z^0 for one sample.

    Mask tokens reuse the image positional table at their grid cell so a mask
    token and the image token at the same location share spatial identity.
    """

    def __init__(self, config: ExperimentConfig, vocab_size: int):
        super().__init__()
        self.config = config
        n, h_grid, w_grid, p = _dims(config)
        d = config.embed_dim
        self.grid = (h_grid, w_grid)

        self.image_proj = nn.Linear(3 * p * p, d)
        mask_in = (3 if "image" not in config.encoder_modalities else 1) * p * p
        self.mask_proj = nn.Linear(mask_in, d)
        self.word_emb = nn.Embedding(vocab_size, d)
        self.pos_image = nn.Parameter(torch.zeros(n, d))
        self.pos_text = nn.Parameter(torch.zeros(config.max_text_len, d))
        self.type_emb = nn.Parameter(torch.zeros(3, d))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in (self.image_proj, self.mask_proj):
            nn.init.trunc_normal_(module.weight, std=0.02)
            nn.init.zeros_(module.bias)
        nn.init.trunc_normal_(self.word_emb.weight, std=0.02)
        nn.init.trunc_normal_(self.pos_image, std=0.02)
        nn.init.trunc_normal_(self.pos_text, std=0.02)
        nn.init.trunc_normal_(self.type_emb, std=0.02)

    def forward(self, sample: PreparedSample) -> TrimodalSequence:
        cfg = self.config
        _, w_grid = self.grid
        enc = set(cfg.encoder_modalities)
        blocks: list[torch.Tensor] = []
        tags: list[np.ndarray] = []
        real: list[torch.Tensor] = []

        meta_rows = []
        if "mask" in enc:
            for k, (coords, contents) in enumerate(zip(sample.mask_coords, sample.mask_contents)):
                flat = coords[:, 0] * w_grid + coords[:, 1]
                tok = self.mask_proj(contents) + self.pos_image[flat] + self.type_emb[MASK_TAG]
                blocks.append(tok)
                tags.append(np.full(len(coords), MASK_TAG, dtype=np.int8))
                real.append(torch.ones(len(coords), dtype=torch.bool))
                meta = np.empty((len(coords), 3), dtype=np.int64)
                meta[:, 0] = k
                meta[:, 1:] = coords.numpy()
                meta_rows.append(meta)
        n_mask = sum(len(m) for m in meta_rows)

        n_image = 0
        if "image" in enc:
            tok = self.image_proj(sample.image_patches) + self.pos_image + self.type_emb[IMAGE_TAG]
            blocks.append(tok)
            n_image = tok.shape[0]
            tags.append(np.full(n_image, IMAGE_TAG, dtype=np.int8))
            real.append(torch.ones(n_image, dtype=torch.bool))

        tok = (self.word_emb(sample.token_ids)
               + self.pos_text
               + self.type_emb[LANGUAGE_TAG])
        blocks.append(tok)
        tags.append(np.full(len(sample.token_ids), LANGUAGE_TAG, dtype=np.int8))
        real.append(sample.token_real)

        return TrimodalSequence(
            tokens=torch.cat(blocks, dim=0),
            modality_tags=np.concatenate(tags),
            mask_token_index=(np.concatenate(meta_rows)
                              if meta_rows else np.zeros((0, 3), dtype=np.int64)),
            pad_mask=torch.cat(real),
            lengths=(n_mask, n_image, len(sample.token_ids)),
        )
