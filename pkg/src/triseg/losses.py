"""Training objective: focal + dice on the predicted mask plus the weighted
selection loss over candidate scores."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ExperimentConfig
from .decoder import selection_loss


@dataclass
class LossReport:
    focal: float
    dice: float
    select: float
    total: float
    loss_weight: float


def focal_loss(logits: torch.Tensor, gt: torch.Tensor, gamma: float,
               alpha: float | None) -> torch.Tensor:
    """Mean over pixels of -alpha_t * (1 - p_t)^gamma * log(p_t).

    alpha=None disables class weighting, in which case gamma=0 reduces to
    plain mean binary cross-entropy.
    """
    gt = gt.to(logits.dtype)
    # log(p_t) and (1 - p_t) via logsigmoid for stability at large |logit|
    log_pt = F.logsigmoid(logits) * gt + F.logsigmoid(-logits) * (1.0 - gt)
    one_minus_pt = torch.sigmoid(-logits) * gt + torch.sigmoid(logits) * (1.0 - gt)
    weight = 1.0 if alpha is None else alpha * gt + (1.0 - alpha) * (1.0 - gt)
    return (-weight * one_minus_pt ** gamma * log_pt).mean()


def dice_loss(logits: torch.Tensor, gt: torch.Tensor, smooth: float) -> torch.Tensor:
    """Soft dice: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), computed
    per sample over the trailing spatial dims and averaged over the batch."""
    p = torch.sigmoid(logits)
    gt = gt.to(logits.dtype)
    dims = tuple(range(logits.ndim - 2, logits.ndim))
    inter = (p * gt).sum(dim=dims)
    denom = p.sum(dim=dims) + gt.sum(dim=dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def total_loss(logits: torch.Tensor, gts: torch.Tensor,
               scores: list[torch.Tensor | None],
               targets: list[int | None],
               config: ExperimentConfig) -> tuple[torch.Tensor, LossReport]:
    """Batch objective: focal + dice + lambda * select.

    select is averaged over the samples that have a supervision target; when
    no sample in the batch has one (or no scores are produced at all), the
    select term is zero.
    """
    focal = focal_loss(logits, gts, config.focal_gamma, config.focal_alpha)
    dice = dice_loss(logits, gts, config.dice_smooth)

    select_terms = [
        selection_loss(s, t)
        for s, t in zip(scores, targets)
        if s is not None and t is not None
    ]
    if select_terms:
        select = torch.stack(select_terms).mean()
    else:
        select = logits.new_zeros(())
    total = focal + dice + config.loss_weight * select
    return total, LossReport(
        focal=float(focal.detach()), dice=float(dice.detach()),
        select=float(select.detach()), total=float(total.detach()),
        loss_weight=config.loss_weight,
    )
