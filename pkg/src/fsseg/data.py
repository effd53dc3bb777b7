"""Datasets, cross-validation folds and K-shot episodes.

Labels are kept in dataset class-index space everywhere in this module:
0 is background, 1..num_classes are object classes and ``ignore_value``
marks pixels excluded from losses and metrics.
"""

from __future__ import annotations

import colorsys
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

IGNORE_VALUE = 255
BACKGROUND = 0

GENERALIZED = "generalized"
NOVEL_ONLY = "novel_only"
EVAL_MODES = (GENERALIZED, NOVEL_ONLY)


class DataError(ValueError):
    """Invalid dataset, fold or sampling request."""


class IngestionError(DataError):
    """A dataset directory could not be read."""

    def __init__(self, path, message):
        self.path = Path(path)
        super().__init__(f"{self.path}: {message}")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    num_classes: int
    background_index: int = BACKGROUND
    ignore_value: int = IGNORE_VALUE
    num_folds: int = 4

    def __post_init__(self):
        if self.background_index != BACKGROUND:
            raise DataError("background_index must be 0")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if 0 <= self.ignore_value <= self.num_classes:
            raise DataError(
                f"ignore_value {self.ignore_value} collides with class range "
                f"[0, {self.num_classes}]"
            )
        if self.num_folds < 1 or self.num_classes % self.num_folds:
            raise DataError(
                f"{self.num_classes} classes cannot be split into {self.num_folds} folds"
            )

    @property
    def class_range(self) -> range:
        return range(self.num_classes + 1)


@dataclass(eq=False)
class SegmentationSample:
    """One image (C x H x W floats in [0, 1]) with its per-pixel labels."""

    image: np.ndarray
    labels: np.ndarray
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image.ndim != 3 or self.labels.ndim != 2:
            raise DataError(f"{self.id}: expected CxHxW image and HxW labels")
        if self.image.shape[1:] != self.labels.shape:
            raise DataError(
                f"{self.id}: image {self.image.shape[1:]} and labels "
                f"{self.labels.shape} differ spatially"
            )

    def classes(self, ignore_value: int = IGNORE_VALUE) -> set[int]:
        present = np.unique(self.labels)
        return {int(v) for v in present if v != ignore_value}

    def __eq__(self, other):
        if not isinstance(other, SegmentationSample):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.labels, other.labels)
        )

    def __repr__(self):
        return f"SegmentationSample(id={self.id!r}, shape={self.labels.shape})"


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]
    ratio_shift: int = 0

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise DataError("base and novel classes overlap")
        if BACKGROUND in self.novel_classes:
            raise DataError("background cannot be a novel class")
        if BACKGROUND not in self.base_classes:
            raise DataError("background must be a base class")

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.base_classes + self.novel_classes))

    def output_classes(self, stage: str) -> tuple[int, ...]:
        """Dataset class index of every network output, in output order.

        Stage I outputs are background followed by the remaining base classes
        in ascending order; fine-tuning appends the novel classes.
        """
        base = (BACKGROUND,) + tuple(sorted(c for c in self.base_classes if c != BACKGROUND))
        if stage == "base":
            return base
        if stage == "finetune":
            return base + tuple(sorted(self.novel_classes))
        raise DataError(f"unknown stage {stage!r}")

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "base_classes": list(self.base_classes),
            "novel_classes": list(self.novel_classes),
            "ratio_shift": self.ratio_shift,
        }


@dataclass
class Episode:
    shots: int
    support: list[SegmentationSample]
    eval_set: list[SegmentationSample]
    seed: int
    # class -> ids of the samples drawn for it, in draw order
    draws: dict[int, tuple[str, ...]] = field(default_factory=dict)


# --- folds -----------------------------------------------------------------


def _check_fold(fold_index: int, num_folds: int = 4):
    if not 0 <= fold_index < num_folds:
        raise DataError(f"fold_index {fold_index} outside [0, {num_folds})")


def pascal_fold_classes(fold_index: int) -> tuple[int, ...]:
    """Novel classes of PASCAL-5i fold ``fold_index``: {5i + j : j = 1..5}."""
    _check_fold(fold_index)
    return tuple(5 * fold_index + j for j in range(1, 6))


def coco_fold_classes(fold_index: int) -> tuple[int, ...]:
    """Novel classes of COCO-20i fold ``fold_index``: {4j - 3 + i : j = 1..20}."""
    _check_fold(fold_index)
    return tuple(4 * j - 3 + fold_index for j in range(1, 21))


def block_fold_classes(num_classes: int, num_folds: int, fold_index: int) -> tuple[int, ...]:
    """Contiguous-block split, the PASCAL-5i rule generalized to any size."""
    _check_fold(fold_index, num_folds)
    per_fold = num_classes // num_folds
    return tuple(per_fold * fold_index + j for j in range(1, per_fold + 1))


def fold_classes(spec: DatasetSpec, fold_index: int) -> tuple[int, ...]:
    name = spec.name.lower()
    if name.startswith("pascal") and spec.num_classes == 20 and spec.num_folds == 4:
        return pascal_fold_classes(fold_index)
    if name.startswith("coco") and spec.num_classes == 80 and spec.num_folds == 4:
        return coco_fold_classes(fold_index)
    return block_fold_classes(spec.num_classes, spec.num_folds, fold_index)


def make_fold(spec: DatasetSpec, fold_index: int, ratio_shift: int = 0) -> FoldSpec:
    """Build the base/novel partition for one fold.

    A negative ``ratio_shift`` moves the lowest-indexed novel classes into the
    base set; a positive one moves the lowest-indexed non-background base
    classes into the novel set.
    """
    novel = sorted(fold_classes(spec, fold_index))
    base = sorted(set(spec.class_range) - set(novel))
    movable_base = [c for c in base if c != BACKGROUND]
    if ratio_shift < 0:
        if -ratio_shift > len(novel) - 1:
            raise DataError(f"ratio_shift {ratio_shift} would empty the novel set")
        moved = novel[:-ratio_shift]
        novel = novel[-ratio_shift:]
        base = sorted(base + moved)
    elif ratio_shift > 0:
        if ratio_shift > len(novel) - 1 or ratio_shift > len(movable_base):
            raise DataError(f"ratio_shift {ratio_shift} is larger than allowed")
        moved = movable_base[:ratio_shift]
        novel = sorted(novel + moved)
        base = [c for c in base if c not in moved]
    return FoldSpec(fold_index, tuple(base), tuple(novel), ratio_shift)


# --- episodes --------------------------------------------------------------


def sample_episode(
    dataset: Sequence[SegmentationSample],
    fold: FoldSpec,
    shots: int,
    seed: int,
    eval_set: Sequence[SegmentationSample] = (),
    ignore_value: int = IGNORE_VALUE,
    classes: Iterable[int] | None = None,
) -> Episode:
    """Draw ``shots`` images containing each class, uniformly without replacement.

    Classes are visited in ascending order and one image may be drawn for
    several classes; such duplicates stay as separate support entries.
    """
    if not dataset:
        raise DataError("cannot sample an episode from an empty dataset")
    if shots < 1:
        raise DataError(f"shots must be >= 1, got {shots}")
    ordered = sorted(dataset, key=lambda s: s.id)
    presence = [s.classes(ignore_value) for s in ordered]
    rng = np.random.default_rng(seed)
    support: list[SegmentationSample] = []
    draws: dict[int, tuple[str, ...]] = {}
    for c in sorted(fold.all_classes if classes is None else classes):
        containing = [i for i, present in enumerate(presence) if c in present]
        if not containing:
            raise DataError(f"no training image contains class {c}")
        take = min(shots, len(containing))
        picked = rng.choice(len(containing), size=take, replace=False)
        chosen = [ordered[containing[int(i)]] for i in picked]
        support.extend(chosen)
        draws[c] = tuple(s.id for s in chosen)
    return Episode(shots=shots, support=support, eval_set=list(eval_set), seed=seed, draws=draws)


def remap_labels(
    sample: SegmentationSample,
    fold: FoldSpec,
    mode: str = GENERALIZED,
    ignore_value: int = IGNORE_VALUE,
) -> SegmentationSample:
    """Relabel for an evaluation mode; novel-only sends base pixels to background."""
    if mode == GENERALIZED:
        return sample
    if mode != NOVEL_ONLY:
        raise DataError(f"unknown evaluation mode {mode!r}")
    labels = sample.labels.copy()
    keep = np.isin(labels, fold.novel_classes) | (labels == ignore_value)
    labels[~keep] = BACKGROUND
    return SegmentationSample(sample.image, labels, sample.id)


# --- synthetic data --------------------------------------------------------

SHAPES = ("square", "disk", "triangle", "diamond", "cross", "ring")


def _shape_mask(shape: str, h: int, w: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "cross":
        arm = max(1, r // 3)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (r / 2) ** 2)
    raise ValueError(shape)


def class_signature(c: int, num_classes: int) -> tuple[str, float]:
    """(shape, hue) that identifies object class ``c``."""
    return SHAPES[(c - 1) % len(SHAPES)], (c - 1) / num_classes


def _render(rng: np.random.Generator, num_classes: int, h: int, w: int, ignore_value: int):
    bg_rgb = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0, 0.2), rng.uniform(0.2, 0.5)))
    ramp = np.linspace(-0.1, 0.1, w)[None, :] * rng.choice([-1, 1])
    image = bg_rgb[:, None, None] + ramp[None] + rng.normal(0, 0.04, (3, h, w))
    labels = np.zeros((h, w), dtype=np.int64)
    occupied = np.zeros((h, w), dtype=bool)

    r_lo, r_hi = max(3, h // 10), max(4, h // 6)
    margin = r_hi + 2
    if h - 2 * margin < 1 or w - 2 * margin < 1:
        raise DataError(f"image size {(h, w)} too small to place shapes")

    placed = 0
    for c in rng.integers(1, num_classes + 1, size=rng.integers(1, 5)):
        c = int(c)
        shape, hue = class_signature(c, num_classes)
        for _ in range(30):
            r = int(rng.integers(r_lo, r_hi + 1))
            cy = int(rng.integers(margin, h - margin))
            cx = int(rng.integers(margin, w - margin))
            mask = _shape_mask(shape, h, w, cy, cx, r)
            halo = ndimage.binary_dilation(mask, iterations=2)
            if not (halo & occupied).any():
                break
        else:
            continue
        rgb = colorsys.hsv_to_rgb(
            (hue + rng.normal(0, 0.015)) % 1.0, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0)
        )
        image[:, mask] = np.asarray(rgb)[:, None] + rng.normal(0, 0.04, (3, int(mask.sum())))
        ring = ndimage.binary_dilation(mask) & ~mask
        labels[mask] = c
        labels[ring] = ignore_value
        occupied |= halo
        placed += 1
    if placed == 0:
        raise DataError(f"image size {(h, w)} too small to place shapes")
    # quantize to 8 bits so that PNG round trips are exact
    image = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return image.astype(np.float32) / 255.0, labels


def generate_synthetic_dataset(
    num_classes: int = 8,
    images: int = 200,
    size: tuple[int, int] = (64, 64),
    seed: int = 0,
    val_fraction: float = 0.25,
    ignore_value: int = IGNORE_VALUE,
    max_attempts: int = 5,
):
    """Colored-shapes stand-in for PASCAL/COCO.

    Every object class has its own (shape, hue) signature.  Interiors are
    labeled with the class, a one-pixel ring around each shape with
    ``ignore_value``.  Returns ``(train, val, spec)``.
    """
    h, w = size
    if num_classes < 8:
        raise DataError("need at least 8 classes for four folds of two")
    if h < 32 or w < 32:
        raise DataError(f"image size {size} below the 32x32 minimum")
    if images < 2:
        raise DataError("need at least 2 images")
    spec = DatasetSpec("synthetic", num_classes, ignore_value=ignore_value, num_folds=4)
    threshold = images / (2 * num_classes)
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        samples = []
        counts = np.zeros(num_classes + 1, dtype=int)
        for i in range(images):
            image, labels = _render(rng, num_classes, h, w, ignore_value)
            sample = SegmentationSample(image, labels, f"syn{seed}_{i:05d}")
            counts[list(sample.classes(ignore_value))] += 1
            samples.append(sample)
        if (counts[1:] >= threshold).all():
            break
    else:
        raise DataError(
            f"class presence below {threshold:.1f} images after {max_attempts} attempts"
        )
    n_val = max(1, int(round(images * val_fraction)))
    return samples[:-n_val], samples[-n_val:], spec


# --- on-disk layout --------------------------------------------------------


def save_dataset(root, train, val, spec: DatasetSpec) -> Path:
    """Write the paired-PNG layout read by :func:`load_dataset`."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in list(train) + list(val):
        rgb = np.round(np.transpose(s.image, (1, 2, 0)) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{s.id}.png")
        labels = s.labels.copy()
        labels[labels == spec.ignore_value] = IGNORE_VALUE
        Image.fromarray(labels.astype(np.uint8), mode="L").save(root / "labels" / f"{s.id}.png")
    manifest = {
        "name": spec.name,
        "num_classes": spec.num_classes,
        "ignore_value": IGNORE_VALUE,
        "num_folds": spec.num_folds,
        "splits": {"train": [s.id for s in train], "val": [s.id for s in val]},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def _read_pair(root: Path, sample_id: str, spec: DatasetSpec) -> SegmentationSample:
    img_path = root / "images" / f"{sample_id}.png"
    lbl_path = root / "labels" / f"{sample_id}.png"
    for p in (img_path, lbl_path):
        if not p.is_file():
            raise IngestionError(p, "file missing")
    with Image.open(img_path) as im:
        rgb = np.asarray(im.convert("RGB"))
    with Image.open(lbl_path) as im:
        if im.mode not in ("L", "P"):
            raise IngestionError(lbl_path, f"label map must be single channel, got mode {im.mode}")
        labels = np.asarray(im).astype(np.int64)
    if rgb.shape[:2] != labels.shape:
        raise IngestionError(lbl_path, f"label size {labels.shape} != image size {rgb.shape[:2]}")
    bad = (labels > spec.num_classes) & (labels != spec.ignore_value)
    if bad.any():
        raise IngestionError(lbl_path, f"label value {int(labels[bad][0])} out of range")
    image = np.transpose(rgb, (2, 0, 1)).astype(np.float32) / 255.0
    return SegmentationSample(image, labels, sample_id)


def load_dataset(root, layout: str = "paired_pngs", workers: int = 4):
    """Read ``root/manifest.json`` plus paired image/label PNGs.

    Returns ``(train, val, spec)`` with each split sorted by sample id.
    """
    if layout != "paired_pngs":
        raise DataError(f"unsupported layout {layout!r}")
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise IngestionError(manifest_path, "missing manifest")
    try:
        manifest = json.loads(manifest_path.read_text())
        spec = DatasetSpec(
            name=manifest["name"],
            num_classes=int(manifest["num_classes"]),
            ignore_value=int(manifest.get("ignore_value", IGNORE_VALUE)),
            num_folds=int(manifest.get("num_folds", 4)),
        )
        splits = manifest["splits"]
    except (KeyError, TypeError, json.JSONDecodeError, DataError) as exc:
        raise IngestionError(manifest_path, f"bad manifest: {exc}") from exc

    def read_split(ids):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda i: _read_pair(root, i, spec), ids))
        return sorted(samples, key=lambda s: s.id)

    return read_split(splits.get("train", [])), read_split(splits.get("val", [])), spec
