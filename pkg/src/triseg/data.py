"""Synthetic referring-segmentation dataset: colored shapes, templated
expressions, and noisy candidate masks standing in for an off-the-shelf
instance segmenter.

Dataset directory layout:
    manifest.jsonl   one JSON record per sample (paths are relative)
    images/*.png     RGB scene renders
    masks/<id>/<k>.png  candidate masks (1-bit)
    gt/<id>.png      ground-truth referent mask (1-bit)
    vocab.json       word-level vocabulary built from this split's expressions
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import ExperimentConfig, make_rng

PAD_ID = 0
UNK_ID = 1

SHAPES = ("circle", "square", "triangle")

# 8-color palette, defined in uint8 so PNG round trips are lossless.
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (50, 90, 220),
    "yellow": (230, 210, 50),
    "orange": (240, 140, 30),
    "purple": (140, 60, 190),
    "cyan": (60, 200, 210),
    "brown": (140, 90, 50),
}
BACKGROUND = (38, 38, 38)

RELATIONS = ("leftmost", "rightmost", "topmost", "bottommost",
             "largest", "smallest", "color-unique", "none")
ORDER_RELATIONS = ("leftmost", "rightmost", "topmost", "bottommost", "largest", "smallest")

MAX_CANDIDATES = 8
NOISE_LEVELS = ("clean", "light", "heavy")

# (erosion/dilation radii, boundary flip probability, p_drop, p_spurious)
_NOISE_PARAMS = {
    "clean": ((0,), 0.0, 0.0, 0.0),
    "light": ((0, 1), 0.05, 0.05, 0.05),
    "heavy": ((0, 1, 2), 0.15, 0.15, 0.15),
}

_CENTER_MARGIN = 3   # px gap required between an extreme center and the runner-up
_SIZE_MARGIN = 2     # px gap required between extreme sizes


class DatasetError(RuntimeError):
    pass


@dataclass
class Instance:
    shape: str
    color: str
    center: tuple[int, int]  # (row, col) in pixels
    size: int                # half-extent in pixels (radius-like)


@dataclass
class SceneSpec:
    instances: list[Instance]
    referent_index: int
    relation: str

    def to_dict(self) -> dict:
        return {
            "relation": self.relation,
            "referent_index": self.referent_index,
            "instances": [
                {"shape": i.shape, "color": i.color,
                 "center": list(i.center), "size": i.size}
                for i in self.instances
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            instances=[Instance(i["shape"], i["color"], tuple(i["center"]), i["size"])
                       for i in d["instances"]],
            referent_index=d["referent_index"],
            relation=d["relation"],
        )


@dataclass
class SampleRecord:
    image: np.ndarray                 # H x W x 3 float32 in [0, 1]
    expression: str
    token_ids: list[int]
    candidate_masks: list[np.ndarray]  # K binary H x W
    gt_mask: np.ndarray                # binary H x W
    gt_instance_index: int | None
    sample_id: str


@dataclass
class Dataset:
    samples: list[SampleRecord]
    vocab: "Vocabulary"
    scenes: list[SceneSpec]


# --- rendering ---------------------------------------------------------------


def render_instance_mask(inst: Instance, height: int, width: int) -> np.ndarray:
    """Exact pixel membership of the (un-occluded) shape."""
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = inst.center
    s = inst.size
    if inst.shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= s * s
    if inst.shape == "square":
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    if inst.shape == "triangle":
        # equilateral, apex up, circumradius s
        verts = [
            (cy - s, cx),
            (cy + 0.5 * s, cx - 0.8660254 * s),
            (cy + 0.5 * s, cx + 0.8660254 * s),
        ]
        inside = np.ones((height, width), dtype=bool)
        for (ay, ax), (by, bx) in zip(verts, verts[1:] + verts[:1]):
            cross = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
            inside &= cross <= 0
        return inside
    raise ValueError(f"unknown shape {inst.shape!r}")


def render_scene(scene: SceneSpec, height: int, width: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Paint instances in list order (later on top); returns the image and
    each instance's visible pixel mask."""
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    full = [render_instance_mask(i, height, width) for i in scene.instances]
    visible = []
    for k, inst in enumerate(scene.instances):
        occluders = np.zeros((height, width), dtype=bool)
        for j in range(k + 1, len(full)):
            occluders |= full[j]
        visible.append(full[k] & ~occluders)
        img[full[k]] = PALETTE[inst.color]
    return img.astype(np.float32) / 255.0, visible


# --- expressions and the brute-force resolution oracle -----------------------


def render_expression(relation: str, color: str | None, shape: str) -> str:
    if relation in ("color-unique", "none"):
        return f"the {color} {shape}"
    if color is not None:
        return f"the {relation} {color} {shape}"
    return f"the {relation} {shape}"


def parse_expression(expression: str) -> tuple[str | None, str | None, str]:
    """(relation-word, color, shape) mentioned by a grammar expression."""
    words = expression.split()
    if len(words) < 2 or words[0] != "the" or words[-1] not in SHAPES:
        raise ValueError(f"not a grammar expression: {expression!r}")
    relation = None
    color = None
    for w in words[1:-1]:
        if w in ORDER_RELATIONS:
            relation = w
        elif w in PALETTE:
            color = w
        else:
            raise ValueError(f"unknown word {w!r} in {expression!r}")
    return relation, color, words[-1]


_EXTREME_KEYS = {
    "leftmost": (lambda i: i.center[1], min),
    "rightmost": (lambda i: i.center[1], max),
    "topmost": (lambda i: i.center[0], min),
    "bottommost": (lambda i: i.center[0], max),
    "largest": (lambda i: i.size, max),
    "smallest": (lambda i: i.size, min),
}


def resolve_expression(expression: str, scene: SceneSpec) -> int | None:
    """Exhaustive attribute matching: the unique instance index the expression
    describes, or None when zero or several instances match."""
    relation, color, shape = parse_expression(expression)
    idx = [k for k, inst in enumerate(scene.instances) if inst.shape == shape]
    if color is not None:
        idx = [k for k in idx if scene.instances[k].color == color]
    if relation is not None:
        key, extreme = _EXTREME_KEYS[relation]
        if not idx:
            return None
        best = extreme(key(scene.instances[k]) for k in idx)
        idx = [k for k in idx if key(scene.instances[k]) == best]
    return idx[0] if len(idx) == 1 else None


def _valid_descriptions(instances: list[Instance]) -> list[tuple[str, str | None, str, int]]:
    """All (relation, color-mention, shape, referent) tuples that uniquely and
    unambiguously (with margins) identify an instance."""
    out = []
    colors = Counter(i.color for i in instances)
    pairs = Counter((i.color, i.shape) for i in instances)
    by_shape: dict[str, list[int]] = {}
    for k, inst in enumerate(instances):
        by_shape.setdefault(inst.shape, []).append(k)

    def strict_extreme(members: list[int], rel: str) -> int | None:
        key, extreme = _EXTREME_KEYS[rel]
        vals = [key(instances[k]) for k in members]
        best = extreme(vals)
        margin = _SIZE_MARGIN if rel in ("largest", "smallest") else _CENTER_MARGIN
        winners = [k for k, v in zip(members, vals) if v == best]
        if len(winners) != 1:
            return None
        rest = [v for v in vals if v != best]
        if rest and min(abs(v - best) for v in rest) < margin:
            return None
        return winners[0]

    for k, inst in enumerate(instances):
        same_shape = by_shape[inst.shape]
        if colors[inst.color] == 1:
            out.append(("color-unique", inst.color, inst.shape, k))
        elif pairs[(inst.color, inst.shape)] == 1 and len(same_shape) >= 2:
            out.append(("none", inst.color, inst.shape, k))
    for shape, members in by_shape.items():
        if len(members) < 2:
            continue
        for rel in ORDER_RELATIONS:
            winner = strict_extreme(members, rel)
            if winner is not None:
                out.append((rel, None, shape, winner))
        # colored variants: extreme within a same-color, same-shape subset
        for color in {instances[k].color for k in members}:
            subset = [k for k in members if instances[k].color == color]
            if len(subset) < 2:
                continue
            for rel in ORDER_RELATIONS:
                winner = strict_extreme(subset, rel)
                if winner is not None:
                    out.append((rel, color, shape, winner))
    return out


# --- scene generation ---------------------------------------------------------


def _size_range(height: int, width: int) -> tuple[int, int]:
    s = min(height, width)
    lo = max(4, round(s * 0.08))
    hi = max(lo + _SIZE_MARGIN + 2, round(s * 0.18))
    return lo, hi


def _sample_instances(rng: np.random.Generator, height: int, width: int) -> list[Instance] | None:
    n = int(rng.integers(2, 7))
    lo, hi = _size_range(height, width)
    instances: list[Instance] = []
    full_masks: list[np.ndarray] = []
    for _ in range(n):
        placed = False
        for _ in range(60):
            size = int(rng.integers(lo, hi + 1))
            if size + 1 >= height // 2 or size + 1 >= width // 2:
                continue
            cy = int(rng.integers(size + 1, height - size - 1))
            cx = int(rng.integers(size + 1, width - size - 1))
            inst = Instance(
                shape=SHAPES[rng.integers(len(SHAPES))],
                color=list(PALETTE)[rng.integers(len(PALETTE))],
                center=(cy, cx),
                size=size,
            )
            mask = render_instance_mask(inst, height, width)
            area = int(mask.sum())
            ok = area > 0
            for other in full_masks:
                overlap = int((mask & other).sum())
                if overlap >= 0.2 * min(area, int(other.sum())):
                    ok = False
                    break
            if ok:
                instances.append(inst)
                full_masks.append(mask)
                placed = True
                break
        if not placed:
            return None
    return instances


def generate_scene(rng: np.random.Generator, config: ExperimentConfig,
                   max_tries: int = 200) -> tuple[SceneSpec, SampleRecord]:
    """Sample a scene whose expression uniquely identifies the referent.

    The returned record carries the clean per-instance visible masks as
    candidates and token_ids left empty (tokenization happens once the split's
    vocabulary exists); perturb_candidates replaces the candidate list.
    """
    height, width = config.image_height, config.image_width
    for _ in range(max_tries):
        instances = _sample_instances(rng, height, width)
        if instances is None:
            continue
        descriptions = _valid_descriptions(instances)
        if not descriptions:
            continue
        scene_try = SceneSpec(instances=instances, referent_index=0, relation="none")
        image, visible = render_scene(scene_try, height, width)
        if any(int(v.sum()) < max(12, 0.5 * int(render_instance_mask(i, height, width).sum()))
               for v, i in zip(visible, instances)):
            continue
        # pick a relation uniformly among those available, then a descriptor
        relations = sorted({d[0] for d in descriptions})
        relation = relations[rng.integers(len(relations))]
        of_rel = [d for d in descriptions if d[0] == relation]
        relation, color, shape, referent = of_rel[rng.integers(len(of_rel))]
        expression = render_expression(relation, color, shape)
        if len(expression.split()) > config.max_text_len:
            continue
        scene = SceneSpec(instances=instances, referent_index=referent, relation=relation)
        if resolve_expression(expression, scene) != referent:
            continue
        record = SampleRecord(
            image=image,
            expression=expression,
            token_ids=[],
            candidate_masks=[v.copy() for v in visible],
            gt_mask=visible[referent].copy(),
            gt_instance_index=referent,
            sample_id="",
        )
        return scene, record
    raise DatasetError(f"could not sample a unique scene in {max_tries} tries")


# --- candidate perturbation ----------------------------------------------------


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def _perturb_one(mask: np.ndarray, radii, flip_p: float, rng: np.random.Generator) -> np.ndarray:
    out = mask.copy()
    radius = int(radii[rng.integers(len(radii))])
    if radius > 0:
        op = ndimage.binary_erosion if rng.random() < 0.5 else ndimage.binary_dilation
        out = op(out, structure=_disk(radius))
    if flip_p > 0:
        band = ndimage.binary_dilation(out, _disk(1)) & ~ndimage.binary_erosion(out, _disk(1))
        out = out ^ (band & (rng.random(out.shape) < flip_p))
    if not out.any():
        return mask.copy()
    return out


def _spurious_blob(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    height, width = shape
    ry = int(rng.integers(3, max(4, height // 8) + 1))
    rx = int(rng.integers(3, max(4, width // 8) + 1))
    cy = int(rng.integers(ry, height - ry))
    cx = int(rng.integers(rx, width - rx))
    yy, xx = np.mgrid[0:height, 0:width]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def perturb_candidates(scene: SceneSpec, instance_masks: list[np.ndarray],
                       noise_level: str, rng: np.random.Generator,
                       ) -> tuple[list[np.ndarray], int | None]:
    """Simulate an off-the-shelf segmenter: per-instance boundary
    erosion/dilation + edge jitter, instance drops, an occasional spurious
    blob, and a shuffled output order.

    Returns (candidates, index of the referent's candidate or None if it was
    dropped).
    """
    if len(instance_masks) != len(scene.instances):
        raise ValueError("need exactly one mask per scene instance")
    if noise_level not in _NOISE_PARAMS:
        raise ValueError(f"noise_level must be one of {NOISE_LEVELS}")
    radii, flip_p, p_drop, p_spurious = _NOISE_PARAMS[noise_level]

    kept: list[tuple[int | None, np.ndarray]] = []
    for k, mask in enumerate(instance_masks):
        if p_drop > 0 and rng.random() < p_drop:
            continue
        kept.append((k, _perturb_one(mask, radii, flip_p, rng)))
    if not kept:
        k = int(rng.integers(len(instance_masks)))
        kept.append((k, _perturb_one(instance_masks[k], radii, flip_p, rng)))
    if p_spurious > 0 and rng.random() < p_spurious and len(kept) < MAX_CANDIDATES:
        kept.append((None, _spurious_blob(instance_masks[0].shape, rng)))

    order = rng.permutation(len(kept))
    candidates = [kept[i][1] for i in order]
    sources = [kept[i][0] for i in order]
    if len(candidates) > MAX_CANDIDATES:
        keep_idx = list(range(len(candidates)))[:MAX_CANDIDATES]
        if scene.referent_index in sources and sources.index(scene.referent_index) >= MAX_CANDIDATES:
            keep_idx[-1] = sources.index(scene.referent_index)
        candidates = [candidates[i] for i in keep_idx]
        sources = [sources[i] for i in keep_idx]
    referent_pos = sources.index(scene.referent_index) if scene.referent_index in sources else None
    return candidates, referent_pos


# --- vocabulary -----------------------------------------------------------------


@dataclass
class Vocabulary:
    word_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return 2 + len(self.word_to_id)

    def tokenize(self, text: str) -> list[int]:
        return [self.word_to_id.get(w, UNK_ID) for w in text.split()]

    def to_dict(self) -> dict:
        return {"<pad>": PAD_ID, "<unk>": UNK_ID, **self.word_to_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls({w: i for w, i in d.items() if w not in ("<pad>", "<unk>")})

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def build_vocabulary(expressions) -> Vocabulary:
    """Word-level map: ids 0/1 reserved for PAD/UNK, corpus words ordered by
    descending frequency then lexicographically."""
    counts = Counter()
    for text in expressions:
        counts.update(text.split())
    if not counts:
        raise ValueError("build_vocabulary: empty corpus")
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary({w: i + 2 for i, w in enumerate(ordered)})


# --- split generation ------------------------------------------------------------


def generate_split(config: ExperimentConfig, count: int, noise_level: str,
                   split: str) -> Dataset:
    """Generate `count` samples deterministically from (config.seed, split).

    Per-sample RNG streams are split from the root seed, so generation order
    is irrelevant and samples could be produced in parallel.
    """
    samples: list[SampleRecord] = []
    scenes: list[SceneSpec] = []
    for i in range(count):
        rng = make_rng(config.seed, "datagen", split, i)
        scene, record = generate_scene(rng, config)
        candidates, referent_pos = perturb_candidates(
            scene, record.candidate_masks, noise_level, rng)
        record.candidate_masks = candidates
        record.gt_instance_index = referent_pos
        record.sample_id = f"{split}_{i:06d}"
        samples.append(record)
        scenes.append(scene)
    vocab = build_vocabulary(s.expression for s in samples)
    for record in samples:
        record.token_ids = vocab.tokenize(record.expression)
    return Dataset(samples=samples, vocab=vocab, scenes=scenes)


# --- on-disk format ---------------------------------------------------------------


def _save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path)


def _load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=bool)


def write_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write samples + vocab; the manifest is written last so a complete
    manifest implies complete sample files. Returns the manifest path."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    lines = []
    for record, scene in zip(dataset.samples, dataset.scenes):
        sid = record.sample_id
        img_u8 = np.round(record.image * 255.0).astype(np.uint8)
        Image.fromarray(img_u8).save(root / "images" / f"{sid}.png")
        _save_mask(record.gt_mask, root / "gt" / f"{sid}.png")
        mask_dir = root / "masks" / sid
        mask_dir.mkdir(parents=True, exist_ok=True)
        cand_paths = []
        for k, mask in enumerate(record.candidate_masks):
            _save_mask(mask, mask_dir / f"{k}.png")
            cand_paths.append(f"masks/{sid}/{k}.png")
        lines.append(json.dumps({
            "sample_id": sid,
            "image": f"images/{sid}.png",
            "gt_mask": f"gt/{sid}.png",
            "candidates": cand_paths,
            "expression": record.expression,
            "token_ids": record.token_ids,
            "gt_instance_index": record.gt_instance_index,
            "scene": scene.to_dict(),
        }))
    dataset.vocab.save(root / "vocab.json")
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"missing manifest: {manifest}")
    vocab = Vocabulary.load(root / "vocab.json")
    samples: list[SampleRecord] = []
    scenes: list[SceneSpec] = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        row = json.loads(line)
        sid = row["sample_id"]
        try:
            image = np.asarray(Image.open(root / row["image"]), dtype=np.uint8)
            gt = _load_mask(root / row["gt_mask"])
            candidates = [_load_mask(root / p) for p in row["candidates"]]
        except (OSError, ValueError) as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
        samples.append(SampleRecord(
            image=image.astype(np.float32) / 255.0,
            expression=row["expression"],
            token_ids=list(row["token_ids"]),
            candidate_masks=candidates,
            gt_mask=gt,
            gt_instance_index=row["gt_instance_index"],
            sample_id=sid,
        ))
        scenes.append(SceneSpec.from_dict(row["scene"]))
    return Dataset(samples=samples, vocab=vocab, scenes=scenes)


def dataset_fingerprint(*directories: str | Path) -> str:
    """sha256 over every file's bytes (sorted relative paths) in the given
    dataset directories; used to prove ablation variants saw identical data."""
    digest = hashlib.sha256()
    for directory in directories:
        root = Path(directory)
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            digest.update(str(path.relative_to(root)).encode("utf-8"))
            digest.update(path.read_bytes())
    return digest.hexdigest()
