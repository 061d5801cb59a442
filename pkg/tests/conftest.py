"""Shared fixtures and independent oracles (brute-force pixel enumeration,
finite differences) used across the suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

from triseg.config import ExperimentConfig, validate
from triseg.data import generate_split

settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def toy_config() -> ExperimentConfig:
    return validate(ExperimentConfig())


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    # small enough for exhaustive checks, all invariants intact
    return validate(ExperimentConfig(
        image_height=32, image_width=32, patch_size=8, embed_dim=16,
        num_blocks=2, num_heads=2, max_text_len=8, channel_reduce=2,
        dropout=0.0, batch_size=4, epochs=2))


@pytest.fixture
def tiny_dataset(tiny_config):
    return generate_split(tiny_config, 6, "clean", "t")


def random_mask(rng: np.random.Generator, shape=(16, 16), p=0.4) -> np.ndarray:
    mask = rng.random(shape) < p
    if not mask.any():
        mask[rng.integers(shape[0]), rng.integers(shape[1])] = True
    return mask


# --- independent oracles ------------------------------------------------------


def pixel_count_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU by explicit pixel loop accumulation."""
    inter = union = 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            pa, pb = bool(a[y, x]), bool(b[y, x])
            inter += pa and pb
            union += pa or pb
    return inter / union if union else 1.0


def pixel_scan_token_count(mask: np.ndarray, patch: int) -> int:
    """N' contribution of one mask: scan every pixel for the tight bbox, align
    outward to the patch grid, count patches inside."""
    top = left = None
    bottom = right = -1
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                top = y if top is None else min(top, y)
                left = x if left is None else min(left, x)
                bottom = max(bottom, y)
                right = max(right, x)
    assert top is not None, "oracle needs a nonzero mask"
    rows = (bottom // patch + 1) - (top // patch)
    cols = (right // patch + 1) - (left // patch)
    return rows * cols


def brute_force_pooled(feature_grid: np.ndarray, mask: np.ndarray, patch: int) -> np.ndarray:
    """Coverage-weighted pooled vector recomputed by full-resolution pixel
    accumulation: every mask pixel contributes its cell's feature / P^2."""
    d = feature_grid.shape[-1]
    acc = np.zeros(d, dtype=np.float64)
    weight = 0.0
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                acc += feature_grid[y // patch, x // patch]
                weight += 1.0
    return acc / weight


def central_difference(fn, tensors: list[torch.Tensor], eps: float = 1e-5,
                       max_elements: int | None = None,
                       rng: np.random.Generator | None = None):
    """Central finite differences of scalar fn w.r.t. each tensor element.

    Returns (analytic, numeric, elements) triples per tensor, where elements
    is the list of flat indices checked (all by default, or a random subset of
    max_elements across all tensors).
    """
    for t in tensors:
        t.grad = None
    value = fn()
    value.backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for t in tensors]

    total = sum(t.numel() for t in tensors)
    if max_elements is not None and total > max_elements:
        assert rng is not None
        chosen = set(rng.choice(total, size=max_elements, replace=False).tolist())
    else:
        chosen = set(range(total))

    checks = []
    offset = 0
    for t, grad in zip(tensors, analytic):
        flat = t.detach().reshape(-1)
        indices = [i for i in range(t.numel()) if offset + i in chosen]
        numeric = torch.zeros(len(indices), dtype=t.dtype)
        with torch.no_grad():
            for j, i in enumerate(indices):
                original = flat[i].item()
                flat[i] = original + eps
                up = fn().item()
                flat[i] = original - eps
                down = fn().item()
                flat[i] = original
                numeric[j] = (up - down) / (2 * eps)
        checks.append((grad.reshape(-1)[indices], numeric, indices))
        offset += t.numel()
    return checks


def max_relative_error(checks) -> float:
    """Relative error of the checked gradient vector: ||a - n|| / max(||a||,
    ||n||). Norm-based so finite-difference roundoff on individually tiny
    elements does not drown the comparison."""
    analytic = torch.cat([a for a, _, _ in checks])
    numeric = torch.cat([n for _, n, _ in checks])
    if analytic.numel() == 0:
        return 0.0
    denom = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / denom
