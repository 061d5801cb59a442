"""End-to-end network: trimodal embedding -> unified encoder -> candidate
selection -> fused decoder input -> progressive segmentation head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import decoder as dec_ops
from .config import ExperimentConfig, derived_dims
from .decoder import ChannelReducers, MaskScorer
from .embedding import PreparedSample, SampleEmbedder, TrimodalSequence
from .encoder import TrimodalEncoder, collate_sequences, split_encoded
from .head import SegmentationHead


@dataclass
class ModelOutput:
    logits: torch.Tensor                  # (B, H, W)
    scores: list[torch.Tensor | None]     # per sample (K,) or None when unscored
    selected: list[int | None]            # rho per sample
    targets: list[int | None]             # alpha per sample (argmax-IoU candidate)


class TrimodalModel(nn.Module):
    def __init__(self, config: ExperimentConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        _, h_grid, w_grid, head_blocks = derived_dims(config)
        self.grid = (h_grid, w_grid)

        self.embedder = SampleEmbedder(config, vocab_size)
        self.encoder = TrimodalEncoder(config)
        self.uses_selection = "mask" in config.decoder_modalities
        self.scorer = MaskScorer(config.embed_dim) if self.uses_selection else None
        self.reducers = ChannelReducers(config)
        self.head = SegmentationHead(dec_ops.fused_channels(config), head_blocks)

    def embed_batch(self, batch: list[PreparedSample]) -> list[TrimodalSequence]:
        return [self.embedder(sample) for sample in batch]

    def forward(self, batch: list[PreparedSample]) -> ModelOutput:
        cfg = self.config
        seqs = self.embed_batch(batch)
        z, pad = collate_sequences(seqs)
        encoded, _ = self.encoder(z, pad)

        fused = []
        all_scores: list[torch.Tensor | None] = []
        selected: list[int | None] = []
        for i, (sample, seq) in enumerate(zip(batch, seqs)):
            feats = split_encoded(encoded[i, :seq.tokens.shape[0]], seq,
                                  self.grid, sample.num_candidates)
            scores = None
            combined = None
            rho = None
            if self.uses_selection:
                scores = dec_ops.score_masks(
                    self.scorer, cfg.score_source, feats.image, feats.masks,
                    sample.coverage, sample.valid_cells)
                rho = dec_ops.select_index(scores)
                combined = dec_ops.combine_mask_features(
                    feats.masks, scores, cfg.selection_strategy)
            fused.append(dec_ops.assemble_decoder_input(
                feats.image, combined, self.reducers, cfg))
            all_scores.append(scores)
            selected.append(rho)

        logits = self.head(torch.stack(fused))
        return ModelOutput(
            logits=logits,
            scores=all_scores,
            selected=selected,
            targets=[sample.target_index for sample in batch],
        )

    def no_decay_parameter_names(self) -> set[str]:
        """Parameters excluded from weight decay: biases, norm affine terms,
        and every embedding table."""
        names = set()
        for name, param in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if param.ndim <= 1 or leaf in ("pos_image", "pos_text", "type_emb"):
                names.add(name)
            elif name.startswith("embedder.word_emb"):
                names.add(name)
        return names
