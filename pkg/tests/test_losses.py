import math

import numpy as np
import pytest
import torch

from conftest import central_difference, max_relative_error
from triseg import losses
from triseg.config import ExperimentConfig, validate


def bce_oracle(logits: np.ndarray, gt: np.ndarray) -> float:
    """Independent mean binary cross-entropy via direct probability formula."""
    p = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    g = gt.astype(np.float64)
    eps = 1e-300
    return float(np.mean(-(g * np.log(p + eps) + (1 - g) * np.log(1 - p + eps))))


def test_focal_gamma0_balanced_is_bce():
    rng = np.random.default_rng(0)
    for _ in range(10):
        logits = rng.standard_normal((5, 7)) * 3
        gt = (rng.random((5, 7)) > 0.5).astype(np.float64)
        ours = float(losses.focal_loss(torch.from_numpy(logits),
                                       torch.from_numpy(gt), gamma=0.0, alpha=None))
        assert ours == pytest.approx(bce_oracle(logits, gt), abs=1e-10)


def test_focal_half_probability_is_ln2():
    logits = torch.zeros(4, 4, dtype=torch.float64)
    gt = torch.ones(4, 4, dtype=torch.float64)
    value = float(losses.focal_loss(logits, gt, gamma=0.0, alpha=None))
    assert value == pytest.approx(math.log(2), abs=1e-12)


def test_focal_perfect_prediction_vanishes():
    logits = torch.full((4, 4), 40.0, dtype=torch.float64)
    gt = torch.ones(4, 4, dtype=torch.float64)
    assert float(losses.focal_loss(logits, gt, gamma=2.0, alpha=0.25)) < 1e-6


def test_focal_single_pixel_hand_value():
    # p_t = 0.9, gamma = 2, alpha = 0.25 -> 0.25 * 0.01 * (-ln 0.9)
    logit = torch.tensor([[math.log(9.0)]], dtype=torch.float64)
    gt = torch.ones(1, 1, dtype=torch.float64)
    value = float(losses.focal_loss(logit, gt, gamma=2.0, alpha=0.25))
    expected = 0.25 * (0.1 ** 2) * (-math.log(0.9))
    assert value == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(2.634e-4, abs=1e-6)


def test_focal_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        logits = torch.from_numpy(rng.standard_normal((3, 3)) * 5)
        gt = torch.from_numpy((rng.random((3, 3)) > 0.3).astype(np.float64))
        assert float(losses.focal_loss(logits, gt, gamma=2.0, alpha=0.25)) >= 0.0


def test_dice_perfect_prediction_zero():
    gt = torch.zeros(4, 4, dtype=torch.float64)
    gt[1:3, 1:3] = 1.0
    logits = torch.where(gt > 0, 100.0, -100.0).double()
    assert float(losses.dice_loss(logits, gt, smooth=1.0)) == 0.0


def test_dice_all_zero_prediction_closed_form():
    gt = torch.zeros(4, 4, dtype=torch.float64)
    gt[0, :3] = 1.0  # G = 3 ones
    logits = torch.full((4, 4), -100.0, dtype=torch.float64)
    value = float(losses.dice_loss(logits, gt, smooth=1.0))
    assert value == pytest.approx(3 / 4, abs=1e-12)


def test_dice_2x2_hand_case():
    logits = torch.tensor([[100.0, 100.0], [-100.0, -100.0]], dtype=torch.float64)
    gt = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    value = float(losses.dice_loss(logits, gt, smooth=1.0))
    assert value == pytest.approx(0.25, abs=1e-12)


def test_dice_range_and_permutation_invariance():
    rng = np.random.default_rng(2)
    for _ in range(10):
        logits = rng.standard_normal((4, 4))
        gt = (rng.random((4, 4)) > 0.5).astype(np.float64)
        base = float(losses.dice_loss(torch.from_numpy(logits),
                                      torch.from_numpy(gt), smooth=1.0))
        assert 0.0 <= base < 1.0
        perm = rng.permutation(16)
        permuted = float(losses.dice_loss(
            torch.from_numpy(logits.reshape(-1)[perm].reshape(4, 4)),
            torch.from_numpy(gt.reshape(-1)[perm].reshape(4, 4)), smooth=1.0))
        assert permuted == pytest.approx(base, abs=1e-12)


def _batch(seed=0, b=2):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.standard_normal((b, 4, 4)))
    gt = torch.from_numpy((rng.random((b, 4, 4)) > 0.5).astype(np.float64))
    return logits, gt


def test_total_loss_lambda_zero():
    cfg = validate(ExperimentConfig(loss_weight=0.0))
    logits, gt = _batch()
    scores = [torch.zeros(4, dtype=torch.float64), None]
    total, report = losses.total_loss(logits, gt, scores, [0, None], cfg)
    assert report.total == pytest.approx(report.focal + report.dice, abs=1e-12)
    assert report.select == pytest.approx(math.log(4), abs=1e-9)


def test_total_loss_uniform_scores_contribution():
    cfg = validate(ExperimentConfig(loss_weight=0.1))
    logits, gt = _batch(seed=3)
    scores = [torch.zeros(4, dtype=torch.float64),
              torch.zeros(4, dtype=torch.float64)]
    total, report = losses.total_loss(logits, gt, scores, [0, 1], cfg)
    assert report.select == pytest.approx(math.log(4), abs=1e-9)
    assert report.total == pytest.approx(
        report.focal + report.dice + 0.1 * math.log(4), abs=1e-9)


def test_total_loss_all_targets_absent():
    cfg = validate(ExperimentConfig(loss_weight=0.1))
    logits, gt = _batch(seed=4)
    scores = [torch.randn(3, dtype=torch.float64),
              torch.randn(5, dtype=torch.float64)]
    total, report = losses.total_loss(logits, gt, scores, [None, None], cfg)
    assert report.select == 0.0
    assert report.total == pytest.approx(report.focal + report.dice, abs=1e-12)


def test_total_monotone_in_lambda():
    logits, gt = _batch(seed=5)
    scores = [torch.tensor([0.0, 1.0], dtype=torch.float64), None]
    totals = []
    for lam in (0.0, 0.1, 0.5, 1.0):
        cfg = validate(ExperimentConfig(loss_weight=lam))
        _, report = losses.total_loss(logits, gt, scores, [0, None], cfg)
        totals.append(report.total)
    assert totals == sorted(totals)


def test_gradient_checks_losses():
    rng = np.random.default_rng(6)
    logits = torch.from_numpy(rng.standard_normal((4, 4))).requires_grad_(True)
    gt = torch.from_numpy((rng.random((4, 4)) > 0.5).astype(np.float64))

    checks = central_difference(
        lambda: losses.focal_loss(logits, gt, gamma=2.0, alpha=0.25), [logits])
    assert max_relative_error(checks) < 1e-4

    logits.grad = None
    checks = central_difference(
        lambda: losses.dice_loss(logits, gt, smooth=1.0), [logits])
    assert max_relative_error(checks) < 1e-4

    scores = torch.from_numpy(rng.standard_normal(5)).requires_grad_(True)
    from triseg.decoder import selection_loss
    checks = central_difference(lambda: selection_loss(scores, 2), [scores])
    assert max_relative_error(checks) < 1e-4
