"""Per-class IoU bookkeeping and the base/novel/total mIoU protocol."""

from __future__ import annotations

import csv
import io
import json
import math
from decimal import Decimal
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from fsseg.data import BACKGROUND, GENERALIZED, IGNORE_VALUE, NOVEL_ONLY, FoldSpec, SegmentationSample, remap_labels


class EvaluationError(ValueError):
    pass


class ConfusionAccumulator:
    """Running TP/FP/FN pixel counts for classes ``0..num_classes``."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        n = num_classes + 1
        self.tp = np.zeros(n, dtype=np.int64)
        self.fp = np.zeros(n, dtype=np.int64)
        self.fn = np.zeros(n, dtype=np.int64)

    def accumulate(self, pred, gt, ignore_value: int = IGNORE_VALUE) -> "ConfusionAccumulator":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise EvaluationError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != ignore_value
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        n = self.num_classes + 1
        if p.size and (p.min() < 0 or p.max() >= n or g.min() < 0 or g.max() >= n):
            raise EvaluationError(f"class index outside [0, {self.num_classes}]")
        hit = p == g
        self.tp += np.bincount(g[hit], minlength=n)
        self.fp += np.bincount(p[~hit], minlength=n)
        self.fn += np.bincount(g[~hit], minlength=n)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise EvaluationError("cannot merge accumulators of different sizes")
        out = ConfusionAccumulator(self.num_classes)
        out.tp = self.tp + other.tp
        out.fp = self.fp + other.fp
        out.fn = self.fn + other.fn
        return out

    def iou(self) -> dict[int, float | None]:
        """IoU per class; ``None`` where TP + FP + FN is zero."""
        denom = self.tp + self.fp + self.fn
        return {c: (float(self.tp[c] / denom[c]) if denom[c] > 0 else None) for c in range(self.num_classes + 1)}


def accumulate(acc: ConfusionAccumulator, pred, gt, ignore_value: int = IGNORE_VALUE) -> ConfusionAccumulator:
    return acc.accumulate(pred, gt, ignore_value)


@dataclass
class ConfidenceStats:
    n: int
    mean: float | None = None
    median: float | None = None
    q1: float | None = None
    q3: float | None = None
    whisker_low: float | None = None
    whisker_high: float | None = None


@dataclass
class EvalReport:
    per_class_iou: dict[int, float | None]
    base_miou: float
    novel_miou: float
    total_miou: float
    fold_index: int
    shots: int | None = None
    mode: str = GENERALIZED
    confidence_stats: ConfidenceStats | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        for key in ("base_miou", "novel_miou", "total_miou"):
            if d[key] is not None and math.isnan(d[key]):
                d[key] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        conf = d.get("confidence_stats")
        nan = float("nan")
        return cls(
            per_class_iou={int(k): v for k, v in d["per_class_iou"].items()},
            base_miou=nan if d["base_miou"] is None else d["base_miou"],
            novel_miou=nan if d["novel_miou"] is None else d["novel_miou"],
            total_miou=nan if d["total_miou"] is None else d["total_miou"],
            fold_index=d["fold_index"],
            shots=d.get("shots"),
            mode=d.get("mode", GENERALIZED),
            confidence_stats=ConfidenceStats(**conf) if conf else None,
        )


def class_sets(fold: FoldSpec, mode: str = GENERALIZED) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(base, novel) classes scored in ``mode``; novel-only keeps background as the base set."""
    if mode == GENERALIZED:
        return tuple(sorted(fold.base_classes)), tuple(sorted(fold.novel_classes))
    if mode == NOVEL_ONLY:
        return (BACKGROUND,), tuple(sorted(fold.novel_classes))
    raise EvaluationError(f"unknown mode {mode!r}")


def _mean_defined(ious: Mapping[int, float | None], classes: Iterable[int]) -> float:
    vals = [ious[c] for c in classes if ious.get(c) is not None]
    return float(np.mean(vals)) if vals else float("nan")


def finalize(acc: ConfusionAccumulator, fold: FoldSpec, mode: str = GENERALIZED, shots: int | None = None) -> EvalReport:
    base, novel = class_sets(fold, mode)
    ious = acc.iou()
    scored = {c: ious[c] for c in sorted(base + novel)}
    if all(v is None for v in scored.values()):
        raise EvaluationError("no class has a defined IoU")
    return EvalReport(
        per_class_iou=scored,
        base_miou=_mean_defined(scored, base),
        novel_miou=_mean_defined(scored, novel),
        total_miou=_mean_defined(scored, base + novel),
        fold_index=fold.fold_index,
        shots=shots,
        mode=mode,
    )


METRICS = ("base_miou", "novel_miou", "total_miou")


def cross_fold_average(reports: Sequence[EvalReport]) -> dict:
    """Mean base/novel/total mIoU over folds plus the per-fold rows."""
    if not reports:
        raise EvaluationError("no reports to average")
    rows = [
        {"fold": r.fold_index, **{m: getattr(r, m) for m in METRICS}}
        for r in sorted(reports, key=lambda r: r.fold_index)
    ]
    mean = {m: float(np.nanmean([getattr(r, m) for r in reports])) for m in METRICS}
    return {"mean": mean, "folds": rows}


# --- prediction ------------------------------------------------------------


def _batches(samples: Sequence[SegmentationSample], batch_size: int):
    for i in range(0, len(samples), batch_size):
        yield samples[i : i + batch_size]


@torch.no_grad()
def predict_logits(network, images: np.ndarray) -> torch.Tensor:
    network.eval()
    return network(torch.as_tensor(images, dtype=torch.float32)).logits


def logits_to_labels(logits: torch.Tensor, output_classes: Sequence[int]) -> np.ndarray:
    """Argmax over outputs in ascending class order, so ties go to the lowest class."""
    order = np.argsort(output_classes, kind="stable")
    ranked = logits[:, torch.from_numpy(order)]
    classes = np.asarray(output_classes)[order]
    return classes[ranked.argmax(dim=1).numpy()]


def predict(network, samples: Sequence[SegmentationSample], output_classes: Sequence[int], batch_size: int = 16) -> list[np.ndarray]:
    preds = []
    for batch in _batches(samples, batch_size):
        logits = predict_logits(network, np.stack([s.image for s in batch]))
        preds.extend(logits_to_labels(logits, output_classes))
    return preds


def evaluate(
    network,
    samples: Sequence[SegmentationSample],
    fold: FoldSpec,
    output_classes: Sequence[int],
    num_classes: int,
    mode: str = GENERALIZED,
    shots: int | None = None,
    ignore_value: int = IGNORE_VALUE,
    batch_size: int = 16,
) -> EvalReport:
    acc = ConfusionAccumulator(num_classes)
    preds = predict(network, samples, output_classes, batch_size)
    for sample, pred in zip(samples, preds):
        gt = remap_labels(sample, fold, mode, ignore_value).labels
        if mode == NOVEL_ONLY:
            pred = np.where(np.isin(pred, fold.novel_classes), pred, BACKGROUND)
        acc.accumulate(pred, gt, ignore_value)
    return finalize(acc, fold, mode, shots)


# --- confidence ------------------------------------------------------------


def describe(values: np.ndarray) -> ConfidenceStats:
    if len(values) == 0:
        return ConfidenceStats(n=0)
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
    return ConfidenceStats(
        n=int(len(values)),
        mean=float(values.mean()),
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
    )


def correct_novel_confidences(
    network,
    samples: Sequence[SegmentationSample],
    fold: FoldSpec,
    output_classes: Sequence[int],
    ignore_value: int = IGNORE_VALUE,
    batch_size: int = 16,
) -> np.ndarray:
    """Softmax score of the predicted class wherever it is a correct novel prediction."""
    novel = np.asarray(fold.novel_classes)
    scores = []
    for batch in _batches(samples, batch_size):
        logits = predict_logits(network, np.stack([s.image for s in batch]))
        probs = torch.softmax(logits, dim=1)
        pred = logits_to_labels(logits, output_classes)
        out_index = {c: i for i, c in enumerate(output_classes)}
        for b, sample in enumerate(batch):
            gt = sample.labels
            hit = (pred[b] == gt) & np.isin(gt, novel) & (gt != ignore_value)
            if not hit.any():
                continue
            idx = np.vectorize(out_index.__getitem__)(pred[b][hit])
            ys, xs = np.nonzero(hit)
            scores.append(probs[b].numpy()[idx, ys, xs])
    return np.concatenate(scores) if scores else np.zeros(0)


def confidence_analysis(
    network,
    samples: Sequence[SegmentationSample],
    fold: FoldSpec,
    output_classes: Sequence[int],
    sample_cap: int = 100_000,
    seed: int = 0,
    ignore_value: int = IGNORE_VALUE,
) -> ConfidenceStats:
    scores = correct_novel_confidences(network, samples, fold, output_classes, ignore_value)
    if len(scores) > sample_cap:
        rng = np.random.default_rng(seed)
        scores = scores[rng.choice(len(scores), size=sample_cap, replace=False)]
    return describe(scores)


def confidence_plot_csv(stats: Mapping[str, ConfidenceStats]) -> str:
    """Box-plot columns, one row per labeled run."""
    buf = io.StringIO()
    fields = ["label", "n", "mean", "whisker_low", "q1", "median", "q3", "whisker_high"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for label, s in stats.items():
        writer.writerow({"label": label, **{k: _fmt(v) for k, v in asdict(s).items()}})
    return buf.getvalue()


# --- summaries -------------------------------------------------------------

# Cited reference rows (base, novel, total mIoU in percent) for the
# meta-learning GFS-Seg baseline; rendered only, never recomputed.
GFS_SEG_REFERENCE = {
    "pascal": {1: (65.48, 18.85, 54.38), 5: (66.14, 22.41, 55.72), 10: (64.52, 23.19, 54.68)},
    "coco": {1: (44.61, 7.05, 35.46), 5: (45.24, 11.05, 36.80), 10: (42.81, 10.39, 34.81)},
}
REFERENCE_LABEL = "GFS-Seg (from paper)"


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def saturation_summary(reports: Mapping[int, EvalReport]) -> list[dict]:
    """mIoU per shot count with deltas from the next-smaller shot count."""
    rows = []
    prev, prev_shots = None, None
    for shots in sorted(reports):
        r = reports[shots]
        row = {"shots": shots, **{m: getattr(r, m) for m in METRICS}}
        for m in METRICS:
            row[f"delta_{m}"] = None if prev is None else getattr(r, m) - getattr(prev, m)
        row["delta_from"] = prev_shots
        rows.append(row)
        prev, prev_shots = r, shots
    return rows


def reference_rows(dataset: str) -> list[dict]:
    """Cited GFS-Seg rows as fractions, labeled with their provenance."""
    table = GFS_SEG_REFERENCE[dataset]
    rows = []
    for k, values in sorted(table.items()):
        frac = [float(Decimal(str(v)) / 100) for v in values]
        rows.append({"method": REFERENCE_LABEL, "shots": k, "percent": values, **dict(zip(METRICS, frac))})
    return rows
