"""Ablation matrix runner: modality variants, selection strategies and the
score-source comparison, each trained per seed on identical dataset files."""

from __future__ import annotations

import csv
import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_io
from . import trainer
from .config import ExperimentConfig, config_from_dict, validate
from .metrics import PRECISION_THRESHOLDS

METRIC_COLUMNS = ["mean_iou"] + [f"pr{int(round(x * 100))}" for x in PRECISION_THRESHOLDS]


@dataclass
class VariantSpec:
    name: str
    overrides: dict = field(default_factory=dict)
    skip_reason: str | None = None


@dataclass
class AblationManifest:
    variants: list[VariantSpec]
    seeds: list[int]
    output_directory: str

    def to_dict(self) -> dict:
        return {
            "variants": [
                {"name": v.name, "overrides": v.overrides,
                 **({"skip_reason": v.skip_reason} if v.skip_reason else {})}
                for v in self.variants
            ],
            "seeds": self.seeds,
            "output_directory": self.output_directory,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationManifest":
        return cls(
            variants=[VariantSpec(v["name"], dict(v.get("overrides", {})),
                                  v.get("skip_reason"))
                      for v in d["variants"]],
            seeds=list(d["seeds"]),
            output_directory=d["output_directory"],
        )


TRIMODAL = ["mask", "image", "language"]

MODALITY_VARIANTS = [
    VariantSpec("v1_image_language", {
        "encoder_modalities": ["image", "language"], "decoder_modalities": ["image"]}),
    VariantSpec("v2_mask_language", {
        "encoder_modalities": ["mask", "language"], "decoder_modalities": ["mask"],
        "score_source": "mask_feature"}),
    VariantSpec("v3_trimodal_dec_image", {
        "encoder_modalities": TRIMODAL, "decoder_modalities": ["image"]}),
    VariantSpec("v4_trimodal_dec_mask", {
        "encoder_modalities": TRIMODAL, "decoder_modalities": ["mask"]}),
    VariantSpec("v5_trimodal_dec_both", {
        "encoder_modalities": TRIMODAL, "decoder_modalities": ["image", "mask"]}),
    VariantSpec("v6_no_pretrain", {},
                skip_reason="multimodal pre-trained weights do not exist at this "
                            "scale; every variant here already trains from scratch"),
]

STRATEGY_VARIANTS = [
    VariantSpec("strategy_mean", {"selection_strategy": "mean"}),
    VariantSpec("strategy_maximum", {"selection_strategy": "maximum"}),
    VariantSpec("strategy_weighted_sum", {"selection_strategy": "weighted_sum"}),
    # adaptive is v5_trimodal_dec_both itself
]

SCORE_SOURCE_VARIANTS = [
    VariantSpec("score_from_mask_features", {"score_source": "mask_feature"}),
]


def default_manifest(output_directory: str = "ablation",
                     seeds: list[int] | None = None) -> AblationManifest:
    return AblationManifest(
        variants=MODALITY_VARIANTS + STRATEGY_VARIANTS + SCORE_SOURCE_VARIANTS,
        seeds=seeds if seeds is not None else [0, 1, 2],
        output_directory=output_directory,
    )


def load_manifest(path: str | Path) -> AblationManifest:
    return AblationManifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_manifest(manifest: AblationManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class RunResult:
    variant: str
    seed: int
    status: str               # ok | failed | skipped
    metrics: dict[str, float] | None = None
    error: str | None = None


def run_ablation(manifest: AblationManifest, base_config: ExperimentConfig,
                 train_dir: str | Path, val_dir: str | Path,
                 threads: int = 1, quiet: bool = True) -> list[RunResult]:
    """Train and evaluate every (variant, seed) pair; failures are recorded
    and the remaining runs continue. Writes results.csv and results.txt into
    the manifest's output directory."""
    out_root = Path(manifest.output_directory)
    out_root.mkdir(parents=True, exist_ok=True)
    data_hash = data_io.dataset_fingerprint(train_dir, val_dir)

    results: list[RunResult] = []
    for variant in manifest.variants:
        if variant.skip_reason:
            results.append(RunResult(variant.name, -1, "skipped", error=variant.skip_reason))
            continue
        for seed in manifest.seeds:
            try:
                overrides = dict(variant.overrides)
                overrides["seed"] = seed
                config = validate(config_from_dict({**base_config.to_dict(), **overrides}))
                run_dir = out_root / variant.name / f"seed{seed}"
                res = trainer.train(config, train_dir, run_dir, val_dir=val_dir,
                                    threads=threads, quiet=quiet)
                results.append(RunResult(variant.name, seed, "ok",
                                         metrics=res.final_summary.to_dict()))
            except Exception as exc:  # noqa: BLE001 - failed runs must not stop the matrix
                results.append(RunResult(variant.name, seed, "failed",
                                         error=f"{type(exc).__name__}: {exc}"))
                if not quiet:
                    traceback.print_exc()
            if not quiet:
                print(f"[ablate] {variant.name} seed={seed}: {results[-1].status}",
                      flush=True)

    write_results_csv(results, out_root / "results.csv", data_hash)
    (out_root / "results.txt").write_text(format_table(results), encoding="utf-8")
    return results


def write_results_csv(results: list[RunResult], path: str | Path, data_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# dataset_sha256={data_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "status"] + METRIC_COLUMNS + ["error"])
        for r in results:
            metric_values = [repr(r.metrics[c]) if r.metrics else "" for c in METRIC_COLUMNS]
            writer.writerow([r.variant, r.seed, r.status] + metric_values + [r.error or ""])


def aggregate(results: list[RunResult]) -> dict[str, dict[str, tuple[float, float]]]:
    """variant -> metric -> (mean, stddev) over its successful seeds."""
    grouped: dict[str, list[dict]] = {}
    for r in results:
        if r.status == "ok" and r.metrics:
            grouped.setdefault(r.variant, []).append(r.metrics)
    out = {}
    for variant, rows in grouped.items():
        out[variant] = {
            c: (float(np.mean([m[c] for m in rows])),
                float(np.std([m[c] for m in rows])))
            for c in METRIC_COLUMNS
        }
    return out


def format_table(results: list[RunResult]) -> str:
    stats = aggregate(results)
    name_width = max([len("variant")] + [len(r.variant) for r in results])
    header = f"{'variant':<{name_width}}  runs  " + "  ".join(
        f"{c:>13}" for c in METRIC_COLUMNS)
    lines = [header, "-" * len(header)]
    seen = []
    for r in results:
        if r.variant not in seen:
            seen.append(r.variant)
    for variant in seen:
        rows = [r for r in results if r.variant == variant]
        if variant in stats:
            n = sum(1 for r in rows if r.status == "ok")
            cells = "  ".join(
                f"{stats[variant][c][0]:.3f}±{stats[variant][c][1]:.3f}".rjust(13)
                for c in METRIC_COLUMNS)
            lines.append(f"{variant:<{name_width}}  {n:>4}  {cells}")
        else:
            status = rows[0].status.upper()
            note = rows[0].error or ""
            lines.append(f"{variant:<{name_width}}  {status}: {note}")
    return "\n".join(lines) + "\n"
