"""Optimization loop: decoupled-weight-decay Adam, linear warmup/decay
schedule, per-epoch checkpoints, deterministic end-to-end training."""

from __future__ import annotations

import csv
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import data as data_io
from . import head as head_ops
from . import losses, metrics
from .config import ExperimentConfig, derive_seed, make_rng, validate
from .embedding import PreparedSample, prepare_sample
from .model import TrimodalModel

LOG_FIELDS = ["step", "epoch", "lr", "focal", "dice", "select", "total",
              "val_mean_iou", "val_pr50", "val_pr60", "val_pr70", "val_pr80", "val_pr90"]


@dataclass
class Schedule:
    total_steps: int
    warmup_steps: int


def make_schedule(total_steps: int, warmup_fraction: float) -> Schedule:
    if total_steps < 1:
        raise ValueError("schedule needs at least one step")
    return Schedule(total_steps=total_steps,
                    warmup_steps=int(round(warmup_fraction * total_steps)))


def lr_at(step: int, schedule: Schedule, base_lr: float) -> float:
    """Linear warmup to base_lr over warmup_steps, then linear decay to zero
    at total_steps. Steps are 1-indexed."""
    total, warmup = schedule.total_steps, schedule.warmup_steps
    if not 1 <= step <= total:
        raise ValueError(f"step {step} outside [1, {total}]")
    if step <= warmup:
        return base_lr * step / warmup
    if total == warmup:
        return 0.0
    return base_lr * (total - step) / (total - warmup)


class AdamW:
    """Adam with decoupled weight decay; parameters listed in `no_decay`
    (biases, norm affines, embedding tables) are never decayed."""

    def __init__(self, named_params: list[tuple[str, torch.nn.Parameter]],
                 no_decay: set[str], weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_params)
        self.no_decay = set(no_decay)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.first_moment = {n: torch.zeros_like(p, memory_format=torch.contiguous_format)
                             for n, p in self.params.items()}
        self.second_moment = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step_count = 0

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, param in self.params.items():
            grad = param.grad
            if grad is None:
                continue
            if not torch.isfinite(grad).all():
                raise RuntimeError(f"non-finite gradient in {name} at optimizer step {t}")
            m = self.first_moment[name]
            v = self.second_moment[name]
            m.mul_(self.beta1).add_(grad, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(grad, grad, value=1.0 - self.beta2)
            update = (m / bias1) / ((v / bias2).sqrt() + self.eps)
            if self.weight_decay and name not in self.no_decay:
                update = update + self.weight_decay * param
            param.add_(update, alpha=-lr)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None


def build_optimizer(model: TrimodalModel, config: ExperimentConfig) -> AdamW:
    return AdamW(list(model.named_parameters()),
                 no_decay=model.no_decay_parameter_names(),
                 weight_decay=config.weight_decay)


def clip_gradients(model: torch.nn.Module, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm))


# --- evaluation ---------------------------------------------------------------


@dataclass
class SampleEval:
    sample_id: str
    iou: float
    scores: list[float] | None
    selected: int | None
    target: int | None


def evaluate_model(model: TrimodalModel, samples: list[PreparedSample],
                   batch_size: int) -> tuple[metrics.EvalSummary, list[SampleEval]]:
    was_training = model.training
    model.eval()
    rows: list[SampleEval] = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            out = model(batch)
            predictions = head_ops.binarize(out.logits)
            for i, sample in enumerate(batch):
                rows.append(SampleEval(
                    sample_id=sample.sample_id,
                    iou=metrics.iou(predictions[i], sample.gt_mask),
                    scores=(None if out.scores[i] is None
                            else [float(s) for s in out.scores[i]]),
                    selected=out.selected[i],
                    target=out.targets[i],
                ))
    if was_training:
        model.train()
    return metrics.summarize([r.iou for r in rows]), rows


def selection_accuracy(rows: list[SampleEval]) -> float:
    """Fraction of samples (with a supervision target) whose selected
    candidate matches it."""
    scored = [r for r in rows if r.target is not None and r.selected is not None]
    if not scored:
        return float("nan")
    return float(np.mean([r.selected == r.target for r in scored]))


# --- training loop --------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_path: Path
    log_path: Path
    final_summary: metrics.EvalSummary | None


def load_split(directory: str | Path, config: ExperimentConfig,
               vocab: data_io.Vocabulary | None = None,
               ) -> tuple[list[PreparedSample], data_io.Vocabulary]:
    """Read a dataset directory and prepare every sample. Expressions are
    tokenized with `vocab` when given (the training vocabulary), so token ids
    stay consistent across splits."""
    dataset = data_io.read_dataset(directory)
    vocab = vocab or dataset.vocab
    return [prepare_sample(r, config, vocab) for r in dataset.samples], vocab


def train(config: ExperimentConfig, train_dir: str | Path, out_dir: str | Path,
          val_dir: str | Path | None = None, resume: str | Path | None = None,
          threads: int = 1, quiet: bool = True) -> TrainResult:
    """Deterministic for fixed (config, seed) at threads=1: bit-identical
    logs and checkpoints, and a resumed run continues bit-identically from
    any epoch checkpoint.

    When `resume` is given, the checkpoint's config and vocabulary take
    precedence over the passed config; the new log covers only the remaining
    epochs.
    """
    validate(config)
    torch.set_num_threads(threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ckpt = ckpt_io.load_checkpoint(resume)
        config = ckpt.config
        vocab = ckpt.vocab
        train_samples, _ = load_split(train_dir, config, vocab)
    else:
        ckpt = None
        train_samples, vocab = load_split(train_dir, config)
    val_samples = None
    if val_dir is not None:
        val_samples, _ = load_split(val_dir, config, vocab)

    torch.manual_seed(derive_seed(config.seed, "init"))
    model = TrimodalModel(config, vocab.size)
    optimizer = build_optimizer(model, config)
    start_epoch = 0
    global_step = 0
    if ckpt is not None:
        ckpt_io.restore_model(model, ckpt)
        ckpt_io.restore_optimizer(optimizer, ckpt)
        start_epoch = ckpt.epoch
        global_step = ckpt.step
        if start_epoch >= config.epochs:
            raise ValueError(f"checkpoint already covers all {config.epochs} epochs")

    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    schedule = make_schedule(steps_per_epoch * config.epochs, config.warmup_fraction)

    log_path = out_dir / "train_log.csv"
    summary = None
    last_ckpt = out_dir / "latest.ckpt"
    with open(log_path, "w", newline="", encoding="utf-8") as log_file:
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        writer.writeheader()
        model.train()
        for epoch in range(start_epoch, config.epochs):
            torch.manual_seed(derive_seed(config.seed, "epoch", epoch))
            order = make_rng(config.seed, "shuffle", epoch).permutation(len(train_samples))
            for start in range(0, len(order), config.batch_size):
                batch = [train_samples[i] for i in order[start:start + config.batch_size]]
                out = model(batch)
                gts = torch.stack([s.gt_tensor for s in batch])
                total, report = losses.total_loss(
                    out.logits, gts, out.scores, out.targets, config)
                optimizer.zero_grad()
                total.backward()
                if config.grad_clip_norm > 0:
                    clip_gradients(model, config.grad_clip_norm)
                global_step += 1
                lr = lr_at(global_step, schedule, config.learning_rate)
                optimizer.step(lr)
                writer.writerow({
                    "step": global_step, "epoch": epoch, "lr": repr(lr),
                    "focal": repr(report.focal), "dice": repr(report.dice),
                    "select": repr(report.select), "total": repr(report.total),
                })
            metric_snapshot = None
            if val_samples:
                summary, _ = evaluate_model(model, val_samples, config.batch_size)
                metric_snapshot = summary.to_dict()
                row = {"step": global_step, "epoch": epoch,
                       "val_mean_iou": repr(summary.mean_iou)}
                for x, value in summary.precision_at.items():
                    row[f"val_pr{int(round(x * 100))}"] = repr(value)
                writer.writerow(row)
            log_file.flush()
            epoch_path = out_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.ckpt"
            ckpt_io.save_checkpoint(epoch_path, model, vocab, epoch + 1,
                                    global_step, optimizer, metric_snapshot)
            shutil.copyfile(epoch_path, last_ckpt)
            if not quiet:
                iou_note = f" val_iou={summary.mean_iou:.4f}" if summary else ""
                print(f"epoch {epoch + 1}/{config.epochs} "
                      f"step {global_step} total={report.total:.4f}{iou_note}",
                      flush=True)
    return TrainResult(out_dir=out_dir, checkpoint_path=last_ckpt,
                       log_path=log_path, final_summary=summary)
