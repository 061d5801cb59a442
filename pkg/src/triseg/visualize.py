"""PNG renderings: per-sample prediction overlays and encoder attention maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from . import checkpoint as ckpt_io
from . import head as head_ops
from .config import derived_dims
from .data import read_dataset
from .embedding import coverage_map, prepare_sample
from .encoder import attention_maps
from .model import TrimodalModel

PREDICTION_COLOR = (255, 0, 0)
GT_COLOR = (0, 255, 0)
OUTLINE_COLOR = (255, 255, 255)
CANDIDATE_COLORS = [
    (255, 128, 0), (0, 128, 255), (255, 0, 255), (0, 255, 255),
    (255, 255, 0), (128, 0, 255), (0, 255, 128), (255, 0, 128),
]


def load_model(ckpt_path: str | Path) -> tuple[TrimodalModel, ckpt_io.Checkpoint]:
    ckpt = ckpt_io.load_checkpoint(ckpt_path)
    model = TrimodalModel(ckpt.config, ckpt.vocab.size)
    ckpt_io.restore_model(model, ckpt)
    model.eval()
    return model, ckpt


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(image * 255.0).astype(np.uint8)


def _outline(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, iterations=2) & ~mask


def render_overlays(ckpt_path: str | Path, dataset_dir: str | Path,
                    sample_ids: list[str], out_dir: str | Path) -> list[Path]:
    """Four side-by-side panels per sample: input image, candidates with the
    selected one outlined, predicted mask, ground truth. Output width 4*W."""
    model, ckpt = load_model(ckpt_path)
    dataset = read_dataset(dataset_dir)
    by_id = {s.sample_id: s for s in dataset.samples}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = []
    for sid in sample_ids:
        if sid not in by_id:
            raise KeyError(f"unknown sample_id {sid!r}")
        record = by_id[sid]
        prepared = prepare_sample(record, ckpt.config, ckpt.vocab)
        with torch.no_grad():
            out = model([prepared])
        prediction = head_ops.binarize(out.logits[0])

        base = _to_u8(record.image)
        panel_candidates = base.copy()
        for k, cand in enumerate(record.candidate_masks):
            color = np.array(CANDIDATE_COLORS[k % len(CANDIDATE_COLORS)], dtype=np.float32)
            region = cand.astype(bool)
            panel_candidates[region] = (
                0.5 * panel_candidates[region] + 0.5 * color).astype(np.uint8)
        if out.selected[0] is not None:
            ring = _outline(record.candidate_masks[out.selected[0]].astype(bool))
            panel_candidates[ring] = OUTLINE_COLOR
        panel_prediction = base.copy()
        panel_prediction[prediction] = PREDICTION_COLOR
        panel_gt = base.copy()
        panel_gt[record.gt_mask.astype(bool)] = GT_COLOR

        composite = np.concatenate(
            [base, panel_candidates, panel_prediction, panel_gt], axis=1)
        path = out_dir / f"overlay_{sid}.png"
        Image.fromarray(composite).save(path)
        paths.append(path)
    return paths


def dump_attention(ckpt_path: str | Path, dataset_dir: str | Path,
                   sample_id: str, out_dir: str | Path,
                   query: tuple[int, int] | None = None) -> list[Path]:
    """Per-block grayscale attention maps for the image token at `query`
    (default: the grid cell where ground truth coverage peaks), plus a
    composite overlaying each block's map on the input image."""
    model, ckpt = load_model(ckpt_path)
    dataset = read_dataset(dataset_dir)
    by_id = {s.sample_id: s for s in dataset.samples}
    if sample_id not in by_id:
        raise KeyError(f"unknown sample_id {sample_id!r}")
    record = by_id[sample_id]
    prepared = prepare_sample(record, ckpt.config, ckpt.vocab)
    _, h_grid, w_grid, _ = derived_dims(ckpt.config)

    if query is None:
        gt_coverage = coverage_map(record.gt_mask, ckpt.config.patch_size)
        query = tuple(int(v) for v in np.unravel_index(np.argmax(gt_coverage),
                                                       gt_coverage.shape))

    with torch.no_grad():
        seq = model.embedder(prepared)
        maps = attention_maps(model.encoder, seq, (h_grid, w_grid), query)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    height, width = record.gt_mask.shape
    scale_y, scale_x = height // h_grid, width // w_grid
    base = _to_u8(record.image)

    paths = []
    overlays = [base]
    for index, amap in enumerate(maps):
        peak = amap.max()
        normalized = amap / peak if peak > 0 else amap
        gray = np.round(normalized * 255.0).astype(np.uint8)
        gray_full = np.kron(gray, np.ones((scale_y, scale_x), dtype=np.uint8))
        path = out_dir / f"attention_{sample_id}_block{index}.png"
        Image.fromarray(gray_full, mode="L").save(path)
        paths.append(path)
        heat = gray_full.astype(np.float32) / 255.0
        tinted = base.astype(np.float32)
        tinted[..., 0] = np.minimum(255.0, tinted[..., 0] + 160.0 * heat)
        overlays.append(tinted.astype(np.uint8))
    composite_path = out_dir / f"attention_{sample_id}_overlay.png"
    Image.fromarray(np.concatenate(overlays, axis=1)).save(composite_path)
    paths.append(composite_path)
    return paths
