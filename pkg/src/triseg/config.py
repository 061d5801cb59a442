"""Experiment configuration: validation, derived dimensions, deterministic seeding."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODALITIES = ("mask", "image", "language")
SELECTION_STRATEGIES = ("adaptive", "mean", "maximum", "weighted_sum")
SCORE_SOURCES = ("aligned_image", "mask_feature")


class ConfigError(ValueError):
    """Raised when a configuration violates one or more invariants."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid config: " + "; ".join(violations))


@dataclass
class ExperimentConfig:
    """All architecture, data and optimization hyperparameters in one record.

    Defaults are the toy scale: small enough to train on CPU in minutes while
    keeping every structural ratio of the full-scale setting expressible.
    """

    image_height: int = 64
    image_width: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    max_text_len: int = 12
    channel_reduce: int = 2
    loss_weight: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.1
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    dropout: float = 0.1
    grad_clip_norm: float = 1.0
    encoder_modalities: tuple[str, ...] = ("mask", "image", "language")
    decoder_modalities: tuple[str, ...] = ("mask", "image")
    selection_strategy: str = "adaptive"
    score_source: str = "aligned_image"

    def __post_init__(self) -> None:
        # Normalize modality sets to a canonical tuple order so that equal
        # configs serialize identically.
        self.encoder_modalities = _canonical_modalities(self.encoder_modalities)
        self.decoder_modalities = _canonical_modalities(self.decoder_modalities)

    def replace(self, **overrides) -> "ExperimentConfig":
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_modalities"] = list(self.encoder_modalities)
        d["decoder_modalities"] = list(self.decoder_modalities)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _canonical_modalities(mods) -> tuple[str, ...]:
    seen = set(mods)
    return tuple(m for m in MODALITIES if m in seen)


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def validate(config: ExperimentConfig) -> ExperimentConfig:
    """Return the config unchanged iff every invariant holds.

    Collects every violated invariant by name and raises ConfigError with the
    full list; never silently repairs.
    """
    v: list[str] = []
    c = config

    def positive(name: str, value, strict: bool = True) -> None:
        if strict and not value > 0:
            v.append(f"{name} must be > 0 (got {value})")
        elif not strict and not value >= 0:
            v.append(f"{name} must be >= 0 (got {value})")

    for name in ("image_height", "image_width", "patch_size", "embed_dim",
                 "num_heads", "max_text_len", "channel_reduce", "epochs",
                 "batch_size", "learning_rate"):
        positive(name, getattr(c, name))
    positive("num_blocks", c.num_blocks, strict=False)
    positive("weight_decay", c.weight_decay, strict=False)
    positive("grad_clip_norm", c.grad_clip_norm, strict=False)
    positive("focal_gamma", c.focal_gamma, strict=False)
    positive("dice_smooth", c.dice_smooth, strict=False)

    if c.patch_size > 0 and c.image_height % c.patch_size != 0:
        v.append("H mod P != 0")
    if c.patch_size > 0 and c.image_width % c.patch_size != 0:
        v.append("W mod P != 0")
    if c.num_heads > 0 and c.embed_dim % c.num_heads != 0:
        v.append("d mod num_heads != 0")
    if not _is_power_of_two(c.patch_size):
        v.append("P must be a power of two")
    if c.channel_reduce > 0 and c.embed_dim % c.channel_reduce != 0:
        v.append("d mod r != 0")
    if not 0.0 <= c.focal_alpha <= 1.0:
        v.append("focal_alpha must lie in [0, 1]")
    if not 0.0 <= c.warmup_fraction <= 1.0:
        v.append("warmup_fraction must lie in [0, 1]")
    if not 0.0 <= c.dropout < 1.0:
        v.append("dropout must lie in [0, 1)")

    enc = set(c.encoder_modalities)
    dec = set(c.decoder_modalities)
    if not enc <= set(MODALITIES):
        v.append("encoder_modalities contains unknown entries")
    if "language" not in enc:
        v.append("encoder_modalities must include language")
    if not enc & {"mask", "image"}:
        v.append("encoder_modalities must include at least one of mask/image")
    if not dec:
        v.append("decoder_modalities must be non-empty")
    if not dec <= (enc & {"mask", "image"}):
        v.append("decoder_modalities must be a subset of encoder_modalities intersected with {mask, image}")

    if c.selection_strategy not in SELECTION_STRATEGIES:
        v.append(f"selection_strategy must be one of {SELECTION_STRATEGIES}")
    if c.score_source not in SCORE_SOURCES:
        v.append(f"score_source must be one of {SCORE_SOURCES}")
    if c.score_source == "aligned_image" and "image" not in enc and "mask" in dec:
        v.append("score_source=aligned_image requires image in encoder_modalities")

    if v:
        raise ConfigError(v)
    return config


def derived_dims(config: ExperimentConfig) -> tuple[int, int, int, int]:
    """(N, H', W', head_blocks) for a validated config."""
    p = config.patch_size
    h_grid = config.image_height // p
    w_grid = config.image_width // p
    return h_grid * w_grid, h_grid, w_grid, int(p).bit_length() - 1


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config from a flat JSON-style dict; unknown keys are rejected."""
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError([f"unknown config key: {k}" for k in unknown])
    kwargs = {}
    for key, value in data.items():
        if key in ("encoder_modalities", "decoder_modalities"):
            value = tuple(value)
        kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_json() + "\n", encoding="utf-8")


def apply_overrides(config: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply CLI `--set key=value` overrides on top of a config."""
    data = config.to_dict()
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError([f"override must look like key=value (got {item!r})"])
        if key not in _FIELD_TYPES:
            raise ConfigError([f"unknown config key: {key}"])
        data[key] = _parse_override(key, raw)
    return config_from_dict(data)


def _parse_override(key: str, raw: str):
    if key in ("encoder_modalities", "decoder_modalities"):
        return [m for m in raw.split(",") if m]
    if key in ("selection_strategy", "score_source"):
        return raw
    current = _FIELD_TYPES[key].default
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


# --- deterministic seeding -------------------------------------------------
#
# One root seed drives every stochastic component (init, data generation,
# shuffling, dropout) through SeedSequence children keyed by string labels,
# so independent components never share a stream and runs are reproducible.


def _label_entropy(labels: tuple) -> list[int]:
    digest = hashlib.sha256(repr(labels).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF] + _label_entropy(labels))


def make_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *labels))


def derive_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed for components that take plain ints (torch)."""
    return int(seed_sequence(seed, *labels).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
