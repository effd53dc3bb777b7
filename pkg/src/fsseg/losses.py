"""Training objectives: cross entropy, stage compositions, triplet and cosine regularizers."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
import torch
import torch.nn.functional as F

from fsseg.data import IGNORE_VALUE


@dataclass(frozen=True)
class LossWeights:
    lambda_aux: float = 0.4
    lambda_triplet_base: float = 0.5
    lambda_triplet_ft: float = 1.0
    margin: float = 1.0
    tau: int = 50

    def __post_init__(self):
        for name in ("lambda_aux", "lambda_triplet_base", "lambda_triplet_ft", "margin"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, ignore_value: int = IGNORE_VALUE) -> torch.Tensor:
    """Mean -log softmax of the true class over non-ignore pixels.

    ``logits`` is (B, C, H, W) or (C, H, W); ``labels`` matches without the
    class axis.  A batch with no valid pixel yields 0 with zero gradient.
    """
    if logits.dim() == 3:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    labels = labels.long()
    valid = labels != ignore_value
    num_classes = logits.shape[1]
    if valid.any() and int(labels[valid].max()) >= num_classes:
        raise ValueError(f"label {int(labels[valid].max())} >= number of classes {num_classes}")
    if not valid.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels, ignore_index=ignore_value, reduction="mean")


def stage1_loss(main, aux, weights: LossWeights = LossWeights()):
    return main + weights.lambda_aux * aux


def stage2_loss(main, aux=None):
    if aux is not None:
        raise ValueError("fine-tuning loss takes no auxiliary term")
    return main


def stage_loss_with_triplet(main, aux, triplet, weights: LossWeights = LossWeights(), stage: str = "base"):
    """Base: main + aux + triplet terms.  Fine-tuning: main + triplet only."""
    if stage == "base":
        return main + weights.lambda_aux * aux + weights.lambda_triplet_base * triplet
    if stage in ("ft", "finetune"):
        if aux is not None:
            raise ValueError("fine-tuning loss takes no auxiliary term")
        return main + weights.lambda_triplet_ft * triplet
    raise ValueError(f"unknown stage {stage!r}")


# --- triplets --------------------------------------------------------------


def triplet_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Euclidean distance along the last axis."""
    return torch.linalg.vector_norm(x - y, dim=-1)


def triplet_loss(a: torch.Tensor, p: torch.Tensor, n: torch.Tensor, mu: float = 1.0) -> torch.Tensor:
    """max(0, d(a, p) - d(a, n) + mu), averaged when given a batch of triples."""
    if not (a.shape == p.shape == n.shape):
        raise ValueError(f"triplet shapes differ: {tuple(a.shape)}, {tuple(p.shape)}, {tuple(n.shape)}")
    # relu takes the zero branch at the kink
    hinge = torch.relu(triplet_distance(a, p) - triplet_distance(a, n) + mu)
    return hinge.mean() if hinge.dim() else hinge


@dataclass
class TripletSet:
    """Per-class (anchor, positive, negative) indices into flattened batch features."""

    triples: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return sum(len(t) for t in self.triples.values())

    def counts(self) -> dict[int, int]:
        return {c: len(t) for c, t in self.triples.items()}

    def stacked(self) -> np.ndarray:
        if not self.triples:
            return np.zeros((0, 3), dtype=np.int64)
        return np.concatenate([self.triples[c] for c in sorted(self.triples)])


def downsample_labels(labels: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor label lookup at feature resolution; (B, H, W) -> (B, h, w)."""
    out = F.interpolate(labels.unsqueeze(1).float(), size=size, mode="nearest")
    return out.squeeze(1).long()


def _point_labels(labels, feature_size, ignore_value):
    lab = torch.as_tensor(labels)
    if lab.dim() == 2:
        lab = lab.unsqueeze(0)
    if tuple(lab.shape[-2:]) != tuple(feature_size):
        lab = downsample_labels(lab, feature_size)
    return lab.reshape(-1).cpu().numpy()


def build_triplet_set(penultimate, labels, classes, tau: int = 50, seed: int = 0, ignore_value: int = IGNORE_VALUE) -> TripletSet:
    """Sample up to ``tau`` triples for each class in ``classes``.

    Point index ``b*h*w + i*w + j`` addresses location (i, j) of batch item b.
    Anchors and positives are disjoint draws from the class's points,
    negatives come from points of other (non-ignore) classes, so a class
    yields min(tau, n_class // 2, n_other) triples.  Classes with fewer than
    two points or no negatives are skipped.
    """
    point_labels = _point_labels(labels, penultimate.shape[-2:], ignore_value)
    valid = point_labels != ignore_value
    rng = np.random.default_rng(seed)
    out = TripletSet()
    for c in sorted(classes):
        pos_pool = np.flatnonzero(point_labels == c)
        neg_pool = np.flatnonzero(valid & (point_labels != c))
        if len(pos_pool) < 2 or len(neg_pool) < 1:
            continue
        n_anchor = min(tau, len(pos_pool) // 2)
        perm = rng.permutation(pos_pool)
        anchors = perm[:n_anchor]
        positives = perm[n_anchor : n_anchor + min(tau, len(pos_pool) - n_anchor)]
        negatives = rng.choice(neg_pool, size=min(tau, len(neg_pool)), replace=False)
        count = min(len(anchors), len(positives), len(negatives))
        out.triples[c] = np.stack(
            [
                rng.permutation(anchors)[:count],
                rng.permutation(positives)[:count],
                rng.permutation(negatives)[:count],
            ],
            axis=1,
        ).astype(np.int64)
    return out


def flatten_features(penultimate: torch.Tensor) -> torch.Tensor:
    """(B, D, h, w) -> (B*h*w, D), matching triplet point indices."""
    if penultimate.dim() == 3:
        penultimate = penultimate.unsqueeze(0)
    return penultimate.permute(0, 2, 3, 1).reshape(-1, penultimate.shape[1])


def batch_triplet_loss(penultimate: torch.Tensor, triplets: TripletSet, mu: float = 1.0) -> torch.Tensor:
    """Mean hinge over every sampled triple of every class; 0 if none."""
    idx = triplets.stacked()
    if len(idx) == 0:
        return penultimate.sum() * 0.0
    feats = flatten_features(penultimate)
    idx = torch.from_numpy(idx)
    return triplet_loss(feats[idx[:, 0]], feats[idx[:, 1]], feats[idx[:, 2]], mu)


def triplet_regularizer(penultimate, labels, classes, weights: LossWeights = LossWeights(), seed: int = 0, ignore_value: int = IGNORE_VALUE):
    triplets = build_triplet_set(penultimate, labels, classes, weights.tau, seed, ignore_value)
    return batch_triplet_loss(penultimate, triplets, weights.margin)


# --- cosine baseline -------------------------------------------------------


def cosine_pairs(penultimate, labels, classes, tau: int = 50, seed: int = 0, ignore_value: int = IGNORE_VALUE):
    """Same-class and cross-class index pairs from the triplet sampler.

    Each triple (a, p, n) contributes the same-class pair (a, p) and the
    cross-class pair (a, n).
    """
    idx = build_triplet_set(penultimate, labels, classes, tau, seed, ignore_value).stacked()
    return idx[:, [0, 1]], idx[:, [0, 2]]


def cosine_contrastive_loss(penultimate, labels, classes, tau: int = 50, seed: int = 0, ignore_value: int = IGNORE_VALUE) -> torch.Tensor:
    """mean(1 - cos) over same-class pairs + mean(max(0, cos)) over cross-class pairs."""
    same, cross = cosine_pairs(penultimate, labels, classes, tau, seed, ignore_value)
    if len(same) == 0:
        return penultimate.sum() * 0.0
    feats = flatten_features(penultimate)
    same, cross = torch.from_numpy(same), torch.from_numpy(cross)
    cos_same = F.cosine_similarity(feats[same[:, 0]], feats[same[:, 1]], dim=-1, eps=1e-8)
    cos_cross = F.cosine_similarity(feats[cross[:, 0]], feats[cross[:, 1]], dim=-1, eps=1e-8)
    return (1 - cos_same).mean() + torch.relu(cos_cross).mean()
