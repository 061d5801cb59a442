"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 train end to end and are marked `slow`; run the full gate
with plain `pytest`, or `pytest -m "not slow"` for the quick checks only.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import (brute_force_pooled, central_difference,
                      max_relative_error, pixel_count_iou,
                      pixel_scan_token_count, random_mask)
from triseg import ablation, data, losses, metrics, trainer
from triseg import checkpoint as ckpt_io
from triseg import decoder as dec
from triseg.config import ExperimentConfig, derived_dims, make_rng, validate
from triseg.embedding import coverage_map, prepare_sample
from triseg.encoder import EncoderBlock
from triseg.head import SegmentationHead
from triseg.model import TrimodalModel


def report(criterion: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance] {status} {criterion}" + (f" ({detail})" if detail else ""))
    assert passed, f"{criterion}: {detail}"


def random_valid_config(rng: np.random.Generator) -> ExperimentConfig:
    patch = int(rng.choice([4, 8, 16]))
    min_cells = max(2, 32 // patch)  # images below ~32 px cannot hold 2-6 shapes
    h_cells = int(rng.integers(min_cells, min_cells + 4))
    w_cells = int(rng.integers(min_cells, min_cells + 4))
    heads = int(rng.choice([1, 2, 4]))
    reduce = int(rng.choice([1, 2, 4]))
    dim = int(rng.choice([2, 4])) * heads * reduce
    enc_dec = rng.integers(3)
    if enc_dec == 0:
        enc, decm = ("image", "language"), ("image",)
    elif enc_dec == 1:
        enc, decm = ("mask", "image", "language"), ("image", "mask")
    else:
        enc, decm = ("mask", "image", "language"), ("mask",)
    return validate(ExperimentConfig(
        image_height=patch * h_cells, image_width=patch * w_cells,
        patch_size=patch, embed_dim=dim, num_heads=heads, channel_reduce=reduce,
        num_blocks=int(rng.integers(0, 3)), max_text_len=int(rng.integers(4, 10)),
        dropout=0.0, encoder_modalities=enc, decoder_modalities=decm))


def test_criterion_1_structural_identities():
    """Sequence length vs pixel-scan N' oracle, head resolution, fused channels."""
    start = time.time()
    rng = np.random.default_rng(20)
    for trial in range(20):
        cfg = random_valid_config(rng)
        scene, record = data.generate_scene(make_rng(trial, "acc1"), cfg)
        vocab = data.build_vocabulary([record.expression])
        prepared = prepare_sample(record, cfg, vocab)
        torch.manual_seed(trial)
        model = TrimodalModel(cfg, vocab.size)
        seq = model.embedder(prepared)

        n, h_grid, w_grid, blocks = derived_dims(cfg)
        n_prime = sum(pixel_scan_token_count(m, cfg.patch_size)
                      for m in record.candidate_masks)
        expected = (n_prime * ("mask" in cfg.encoder_modalities)
                    + n * ("image" in cfg.encoder_modalities)
                    + cfg.max_text_len)
        assert seq.tokens.shape[0] == expected, cfg

        out = model([prepared])
        assert out.logits.shape == (1, cfg.image_height, cfg.image_width)
        expected_channels = (cfg.embed_dim // cfg.channel_reduce
                             * len(cfg.decoder_modalities) + 2)
        assert model.head.channels == expected_channels
    elapsed = time.time() - start
    report("criterion 1: structural identities", True,
           f"20 configs, {elapsed:.1f}s")


def test_criterion_2_gradient_fidelity():
    """Central finite differences vs autograd at 64-bit, <= 200 elements each."""
    start = time.time()
    rng = np.random.default_rng(2)
    worst = {}

    logits = torch.from_numpy(rng.standard_normal((4, 4))).requires_grad_(True)
    gt = torch.from_numpy((rng.random((4, 4)) > 0.5).astype(np.float64))
    checks = central_difference(
        lambda: losses.focal_loss(logits, gt, gamma=2.0, alpha=0.25), [logits])
    worst["focal"] = max_relative_error(checks)

    logits.grad = None
    checks = central_difference(
        lambda: losses.dice_loss(logits, gt, smooth=1.0), [logits])
    worst["dice"] = max_relative_error(checks)

    scores = torch.from_numpy(rng.standard_normal(6)).requires_grad_(True)
    checks = central_difference(lambda: dec.selection_loss(scores, 1), [scores])
    worst["select"] = max_relative_error(checks)

    torch.manual_seed(2)
    block = EncoderBlock(dim=8, num_heads=2, dropout=0.0).double()
    z = torch.randn(1, 12, 8, dtype=torch.float64)
    pad = torch.ones(1, 12, dtype=torch.bool)
    checks = central_difference(lambda: block(z, pad)[0].sum(),
                                list(block.parameters()),
                                max_elements=200, rng=rng)
    worst["encoder_block"] = max_relative_error(checks)

    torch.manual_seed(3)
    head = SegmentationHead(channels=6, num_blocks=1).double().train()
    x = torch.randn(1, 6, 2, 2, dtype=torch.float64)
    checks = central_difference(lambda: head(x).sum(), list(head.parameters()),
                                max_elements=200, rng=rng)
    worst["head"] = max_relative_error(checks)

    passed = all(v < 1e-4 for v in worst.values())
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    assert time.time() - start < 120
    report("criterion 2: gradient fidelity", passed, detail)


def test_criterion_3_closed_form_losses():
    errors = []
    for k in (2, 4, 8):
        value = float(dec.selection_loss(torch.zeros(k, dtype=torch.float64), 0))
        errors.append(abs(value - math.log(k)))
    assert max(errors) < 1e-9

    rng = np.random.default_rng(3)

    def bce_oracle(lg, g):
        p = 1.0 / (1.0 + np.exp(-lg))
        return float(np.mean(-(g * np.log(p) + (1 - g) * np.log1p(-p))))

    for _ in range(20):
        lg = rng.standard_normal((5, 5)) * 3
        g = (rng.random((5, 5)) > 0.5).astype(np.float64)
        ours = float(losses.focal_loss(torch.from_numpy(lg), torch.from_numpy(g),
                                       gamma=0.0, alpha=None))
        assert abs(ours - bce_oracle(lg, g)) < 1e-10

    gt = torch.zeros(4, 4, dtype=torch.float64)
    gt[1:3, :2] = 1.0
    logits = torch.where(gt > 0, 100.0, -100.0).double()
    assert float(losses.dice_loss(logits, gt, smooth=1.0)) == 0.0

    hand = float(dec.selection_loss(torch.tensor([2.0, 0.0, 0.0],
                                                 dtype=torch.float64), 0))
    assert abs(hand - 0.2395) < 1e-4
    report("criterion 3: closed-form loss values", True,
           f"lnK err {max(errors):.1e}, Eq-7 case {hand:.6f}")


def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a = random_mask(rng, (int(rng.integers(2, 17)), int(rng.integers(2, 17))))
        b = random_mask(rng, a.shape, p=float(rng.uniform(0.1, 0.7)))
        assert metrics.iou(a, b) == pixel_count_iou(a, b)

    for _ in range(200):
        gt = random_mask(rng, (12, 12))
        cands = [random_mask(rng, (12, 12)) for _ in range(int(rng.integers(1, 7)))]
        ious = [pixel_count_iou(c, gt) for c in cands]
        assert metrics.best_candidate(cands, gt) == (int(np.argmax(ious)),
                                                     max(ious))

    worst = 0.0
    for _ in range(50):
        grid = rng.standard_normal((4, 4, 6))
        mask = random_mask(rng, (16, 16))
        pooled = dec.pool_aligned_features(
            torch.from_numpy(grid), torch.from_numpy(coverage_map(mask, 4))).numpy()
        expected = brute_force_pooled(grid, mask, 4)
        worst = max(worst, float(np.max(
            np.abs(pooled - expected) / np.maximum(np.abs(expected), 1e-8))))
    assert worst < 1e-5
    report("criterion 4: oracle equivalence", True, f"pooling rel err {worst:.1e}")


def test_criterion_5_selection_invariances():
    rng = np.random.default_rng(5)
    for _ in range(100):
        scores = torch.from_numpy(rng.standard_normal(int(rng.integers(2, 9))))
        a = float(rng.uniform(0.05, 4.0))
        b = float(rng.uniform(-3.0, 3.0))
        transforms = [
            lambda s: a * s + b,
            lambda s: torch.exp(a * s),
            lambda s: s ** 3 + a * s + b,
            lambda s: a * torch.tanh(s) + s,
        ]
        g = transforms[int(rng.integers(len(transforms)))]
        assert dec.select_index(g(scores)) == dec.select_index(scores)

    for _ in range(50):
        scores = torch.from_numpy(rng.standard_normal(int(rng.integers(2, 9))))
        target = int(rng.integers(len(scores)))
        shift = float(rng.uniform(-50, 50))
        base = float(dec.selection_loss(scores, target))
        shifted = float(dec.selection_loss(scores + shift, target))
        assert abs(base - shifted) < 1e-9

    tied = torch.tensor([1.0, 0.3, 1.0, 1.0], dtype=torch.float64)
    assert dec.select_index(tied) == 0
    report("criterion 5: selection invariances", True)


@pytest.fixture(scope="module")
def determinism_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc6")
    cfg = ExperimentConfig(image_height=32, image_width=32, patch_size=8,
                           embed_dim=16, num_blocks=2, num_heads=2,
                           max_text_len=8, epochs=2, batch_size=4)
    data.write_dataset(data.generate_split(cfg, 8, "light", "train"), root / "train")
    data.write_dataset(data.generate_split(cfg.replace(seed=9), 4, "light", "val"),
                       root / "val")
    return root, cfg


def test_criterion_6_determinism_and_checkpointing(determinism_dirs, tmp_path):
    root, cfg = determinism_dirs
    res_a = trainer.train(cfg, root / "train", tmp_path / "a", val_dir=root / "val")
    res_b = trainer.train(cfg, root / "train", tmp_path / "b", val_dir=root / "val")
    logs_equal = res_a.log_path.read_bytes() == res_b.log_path.read_bytes()

    resumed = trainer.train(cfg, root / "train", tmp_path / "c",
                            val_dir=root / "val",
                            resume=tmp_path / "a" / "checkpoints" / "epoch_001.ckpt")
    ck_full = ckpt_io.load_checkpoint(res_a.checkpoint_path)
    ck_res = ckpt_io.load_checkpoint(resumed.checkpoint_path)
    bits_equal = all(np.array_equal(ck_full.arrays[k], ck_res.arrays[k])
                     for k in ck_full.arrays)
    report("criterion 6: determinism and checkpointing",
           logs_equal and bits_equal,
           f"logs_equal={logs_equal}, resume_bits_equal={bits_equal}")


@pytest.mark.slow
def test_criterion_7_end_to_end_learnability(tmp_path):
    """64 clean samples, toy architecture: train IoU >= 0.90 and rho == alpha
    on >= 95% of training samples within 15 CPU minutes."""
    budget = 15 * 60
    start = time.time()
    cfg = ExperimentConfig(epochs=150, batch_size=16, learning_rate=1e-3, seed=3)
    data.write_dataset(data.generate_split(cfg, 64, "clean", "train"),
                       tmp_path / "train")
    result = trainer.train(cfg, tmp_path / "train", tmp_path / "run", threads=2)

    ckpt = ckpt_io.load_checkpoint(result.checkpoint_path)
    model = TrimodalModel(ckpt.config, ckpt.vocab.size)
    ckpt_io.restore_model(model, ckpt)
    samples, _ = trainer.load_split(tmp_path / "train", ckpt.config, ckpt.vocab)
    summary, rows = trainer.evaluate_model(model, samples, cfg.batch_size)
    accuracy = trainer.selection_accuracy(rows)
    elapsed = time.time() - start

    passed = summary.mean_iou >= 0.90 and accuracy >= 0.95 and elapsed < budget
    report("criterion 7: end-to-end learnability", passed,
           f"train IoU {summary.mean_iou:.4f}, selection acc {accuracy:.3f}, "
           f"{elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_8_ablation_ordering(tmp_path):
    """Seed-averaged ordering: trimodal variant 5 >= bimodal variant 1 and
    adaptive >= mean pooling, on a 2000-sample light-noise set.

    The ordering itself is a flagged finding, not a build break: the table is
    always produced and printed.
    """
    budget = 2 * 60 * 60
    start = time.time()
    # 16 epochs: the adaptive selector needs ~10 epochs before its accuracy
    # on ordering relations lifts the trimodal variant past the bimodal one
    cfg = ExperimentConfig(epochs=16, batch_size=16, learning_rate=1e-3)
    data.write_dataset(data.generate_split(cfg, 2000, "light", "train"),
                       tmp_path / "train")
    data.write_dataset(data.generate_split(cfg, 400, "light", "val"),
                       tmp_path / "val")

    manifest = ablation.AblationManifest(
        variants=[
            ablation.VariantSpec("v1_image_language", {
                "encoder_modalities": ["image", "language"],
                "decoder_modalities": ["image"]}),
            ablation.VariantSpec("v5_trimodal_dec_both", {}),
            ablation.VariantSpec("strategy_mean", {"selection_strategy": "mean"}),
        ],
        seeds=[0, 1, 2],
        output_directory=str(tmp_path / "ablate"),
    )
    results = ablation.run_ablation(manifest, cfg, tmp_path / "train",
                                    tmp_path / "val", threads=2, quiet=False)
    table = (tmp_path / "ablate" / "results.txt").read_text()
    print(table)

    failed = [r for r in results if r.status == "failed"]
    assert not failed, failed
    stats = ablation.aggregate(results)
    v5 = stats["v5_trimodal_dec_both"]["mean_iou"][0]
    v1 = stats["v1_image_language"]["mean_iou"][0]
    mean_pool = stats["strategy_mean"]["mean_iou"][0]
    elapsed = time.time() - start
    assert elapsed < budget, f"ablation exceeded budget: {elapsed:.0f}s"

    trimodal_ok = v5 >= v1
    adaptive_ok = v5 >= mean_pool
    status = "PASS" if (trimodal_ok and adaptive_ok) else "FLAGGED"
    print(f"[acceptance] {status} criterion 8: ablation ordering "
          f"(v5 {v5:.4f} vs v1 {v1:.4f}; adaptive {v5:.4f} vs mean {mean_pool:.4f}; "
          f"{elapsed:.0f}s)")
    if not (trimodal_ok and adaptive_ok):
        pytest.xfail("ordering finding flagged: " + (
            f"v5 {v5:.4f} < v1 {v1:.4f}; " if not trimodal_ok else "") + (
            f"adaptive {v5:.4f} < mean {mean_pool:.4f}" if not adaptive_ok else ""))


def test_criterion_9_metric_surface(determinism_dirs, tmp_path):
    root, cfg = determinism_dirs
    rng = np.random.default_rng(9)
    for _ in range(200):
        ious = rng.random(int(rng.integers(1, 40)))
        summary = metrics.summarize(ious)
        values = [summary.precision_at[x] for x in metrics.PRECISION_THRESHOLDS]
        assert all(a >= b for a, b in zip(values, values[1:]))

    # schema stability across independently trained runs
    keys = []
    for seed in (0, 1):
        res = trainer.train(cfg.replace(seed=seed, epochs=1), root / "train",
                            tmp_path / f"run{seed}", val_dir=root / "val")
        keys.append(sorted(json.loads(res.final_summary.to_json())))
    assert keys[0] == keys[1] == ["mean_iou", "n_samples", "pr50", "pr60",
                                  "pr70", "pr80", "pr90"]
    report("criterion 9: metric surface", True)
