"""Mask IoU, Precision@X and the supervision-target utilities built on them."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class EvalSummary:
    mean_iou: float
    precision_at: dict[float, float]
    n_samples: int

    def to_dict(self) -> dict:
        out = {"mean_iou": self.mean_iou, "n_samples": self.n_samples}
        for x in PRECISION_THRESHOLDS:
            out[f"pr{int(round(x * 100))}"] = self.precision_at[x]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a AND b| / |a OR b|. Both empty -> 1.0, exactly one empty -> 0.0."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(a, b).sum()
    return float(inter) / float(union)


def precision_at(ious, threshold: float) -> float:
    """Fraction of entries strictly greater than the threshold."""
    values = np.asarray(list(ious), dtype=np.float64)
    if values.size == 0:
        raise ValueError("precision_at: empty iou list")
    return float(np.mean(values > threshold))


def best_candidate(candidates, gt: np.ndarray) -> tuple[int, float]:
    """Index and value of the max-IoU candidate; ties go to the lowest index."""
    if len(candidates) == 0:
        raise ValueError("best_candidate: no candidates")
    ious = [iou(c, gt) for c in candidates]
    idx = int(np.argmax(ious))
    return idx, ious[idx]


def supervision_index(candidates, gt: np.ndarray) -> int | None:
    """Selection-loss target: argmax-IoU index, absent when nothing overlaps gt.

    A best IoU of exactly 0 means the generator dropped the referent's
    candidate and no other candidate touches the ground truth; there is no
    correct target in that case.
    """
    idx, value = best_candidate(candidates, gt)
    return idx if value > 0.0 else None


def summarize(ious) -> EvalSummary:
    values = [float(x) for x in ious]
    if not values:
        raise ValueError("summarize: empty iou list")
    return EvalSummary(
        mean_iou=float(np.mean(values)),
        precision_at={x: precision_at(values, x) for x in PRECISION_THRESHOLDS},
        n_samples=len(values),
    )
