"""Two-stage training: base training, then K-shot fine-tuning with model selection."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from fsseg.data import GENERALIZED, IGNORE_VALUE, NOVEL_ONLY, Episode, FoldSpec, SegmentationSample, remap_labels
from fsseg.evaluation import EvalReport, evaluate, finalize, ConfusionAccumulator, logits_to_labels
from fsseg.losses import (
    LossWeights,
    cosine_contrastive_loss,
    masked_cross_entropy,
    stage1_loss,
    stage2_loss,
    stage_loss_with_triplet,
    triplet_regularizer,
)
from fsseg.model import BACKBONE, FreezePolicy, SegNet, apply_freeze, set_train_mode, trainable_groups

log = logging.getLogger(__name__)

REGULARIZERS = ("none", "triplet", "cosine")


class TrainingError(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass
class StageConfig:
    stage: str = "base"
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.01
    lr_decay: float = 1e-5  # applied as SGD weight decay
    momentum: float = 0.9
    freeze: FreezePolicy = FreezePolicy.NONE
    regularizer: str = "none"
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.freeze = FreezePolicy(self.freeze)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.stage not in ("base", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = self.freeze.value
        return d


@dataclass
class TrainRecord:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)
    best: dict | None = None
    provenance: dict = field(default_factory=dict)

    def events(self) -> list[dict]:
        out = [{"event": "provenance", "stage": self.stage, **self.provenance}] if self.provenance else []
        out += [{"event": "epoch", "stage": self.stage, **e} for e in self.epochs]
        out += [{"event": "eval", "stage": self.stage, **e} for e in self.evaluations]
        if self.best is not None:
            out.append({"event": "best", "stage": self.stage, **self.best})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events())


# --- tensors ---------------------------------------------------------------


def label_lookup(output_classes: Sequence[int], num_classes: int, ignore_value: int = IGNORE_VALUE) -> np.ndarray:
    """Dataset class -> output index; classes without an output become ignore."""
    lut = np.full(max(num_classes, ignore_value) + 1, ignore_value, dtype=np.int64)
    for i, c in enumerate(output_classes):
        lut[c] = i
    return lut


def to_tensors(samples: Sequence[SegmentationSample], lut: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    labels = torch.from_numpy(np.stack([lut[s.labels] for s in samples]))
    return images, labels


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single sample
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _regularizer(config: StageConfig, penultimate, labels, num_outputs, seed, ignore_value):
    if config.regularizer == "triplet":
        return triplet_regularizer(penultimate, labels, range(num_outputs), config.weights, seed, ignore_value)
    return cosine_contrastive_loss(penultimate, labels, range(num_outputs), config.weights.tau, seed, ignore_value)


def _optimizer(params, config: StageConfig):
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.lr_decay)


def _check_finite(loss, record, epoch):
    if not math.isfinite(float(loss.detach())):
        record.provenance["aborted"] = {"epoch": epoch, "loss": str(float(loss.detach()))}
        raise TrainingError(f"non-finite loss at epoch {epoch}", record)


# --- stage I ---------------------------------------------------------------


def train_stage1(
    network: SegNet,
    samples: Sequence[SegmentationSample],
    fold: FoldSpec,
    config: StageConfig,
    num_classes: int,
    ignore_value: int = IGNORE_VALUE,
) -> tuple[SegNet, TrainRecord]:
    """Train backbone and classifier on base classes.

    Outputs follow ``fold.output_classes("base")``; pixels of novel classes
    are ignored by the loss.
    """
    if config.stage != "base":
        raise ValueError("train_stage1 needs a base-stage config")
    output_classes = fold.output_classes("base")
    if network.config.num_outputs != len(output_classes):
        raise ValueError(f"network has {network.config.num_outputs} outputs, fold needs {len(output_classes)}")
    images, labels = to_tensors(samples, label_lookup(output_classes, num_classes, ignore_value))
    record = TrainRecord("base")
    torch.manual_seed(config.seed)
    params = apply_freeze(network, config.freeze)
    opt = _optimizer(params, config)
    for epoch in range(1, config.epochs + 1):
        set_train_mode(network, config.freeze)
        rng = np.random.default_rng([config.seed, epoch])
        sums: dict[str, float] = {}
        batches = _batch_indices(len(images), config.batch_size, rng)
        for b, idx in enumerate(batches):
            idx = torch.from_numpy(idx)
            x, y = images[idx], labels[idx]
            out = network(x)
            terms = {"main": masked_cross_entropy(out.logits, y, ignore_value)}
            if out.aux_logits is not None:
                terms["aux"] = masked_cross_entropy(out.aux_logits, y, ignore_value)
            aux = terms.get("aux", torch.zeros(()))
            if config.regularizer == "none":
                loss = stage1_loss(terms["main"], aux, config.weights)
            else:
                reg = _regularizer(config, out.penultimate, y, len(output_classes), _sub_seed(config.seed, epoch, b), ignore_value)
                terms[config.regularizer] = reg
                if config.regularizer == "triplet":
                    loss = stage_loss_with_triplet(terms["main"], aux, reg, config.weights, "base")
                else:
                    loss = stage1_loss(terms["main"], aux, config.weights) + config.weights.lambda_triplet_base * reg
            _check_finite(loss, record, epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["loss"] = sums.get("loss", 0.0) + float(loss.detach())
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
        n = len(batches)
        record.epochs.append(
            {
                "epoch": epoch,
                "loss": sums["loss"] / n,
                "components": {k: v / n for k, v in sums.items() if k != "loss"},
                "lr": opt.param_groups[0]["lr"],
            }
        )
        log.debug("stage1 epoch %d loss %.4f", epoch, sums["loss"] / n)
    network.eval()
    return network, record


# --- stage II --------------------------------------------------------------


class _FrozenBackboneCache:
    """Backbone features of a fixed image set, valid while the backbone is frozen."""

    def __init__(self, network: SegNet, images: torch.Tensor, batch_size: int = 32):
        network.backbone.eval()
        feats = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                feats.append(network.features(images[i : i + batch_size])[0])
        self.features = torch.cat(feats)
        self.size = tuple(images.shape[-2:])


def _evaluate_cached(network, cache, samples, fold, output_classes, num_classes, mode, shots, ignore_value):
    acc = ConfusionAccumulator(num_classes)
    network.eval()
    with torch.no_grad():
        for i in range(0, len(samples), 32):
            logits = network.head(cache.features[i : i + 32], None, cache.size).logits
            preds = logits_to_labels(logits, output_classes)
            for sample, pred in zip(samples[i : i + 32], preds):
                gt = remap_labels(sample, fold, mode, ignore_value).labels
                if mode == NOVEL_ONLY:
                    pred = np.where(np.isin(pred, fold.novel_classes), pred, 0)
                acc.accumulate(pred, gt, ignore_value)
    return finalize(acc, fold, mode, shots)


EvaluateFn = Callable[[SegNet, int], EvalReport]


def train_stage2(
    network: SegNet,
    episode: Episode,
    fold: FoldSpec,
    config: StageConfig,
    num_classes: int,
    mode: str = GENERALIZED,
    ignore_value: int = IGNORE_VALUE,
    evaluate_fn: EvaluateFn | None = None,
) -> tuple[SegNet, TrainRecord]:
    """Fine-tune on the episode's support set and keep the best-total-mIoU snapshot.

    ``evaluate_fn(network, epoch)`` overrides evaluation on ``episode.eval_set``.
    """
    if config.stage != "finetune":
        raise ValueError("train_stage2 needs a finetune-stage config")
    if not episode.support:
        raise ValueError("episode has an empty support set")
    output_classes = fold.output_classes("finetune")
    if network.config.num_outputs != len(output_classes):
        raise ValueError(f"network has {network.config.num_outputs} outputs, fold needs {len(output_classes)}")
    if network.aux is not None:
        raise ValueError("fine-tuning runs without the auxiliary head")

    support = [remap_labels(s, fold, mode, ignore_value) for s in episode.support]
    images, labels = to_tensors(support, label_lookup(output_classes, num_classes, ignore_value))
    record = TrainRecord("finetune")
    torch.manual_seed(config.seed)
    params = apply_freeze(network, config.freeze)
    opt = _optimizer(params, config)

    backbone_frozen = BACKBONE not in trainable_groups(config.freeze)
    train_cache = _FrozenBackboneCache(network, images) if backbone_frozen else None
    eval_cache = None
    if evaluate_fn is None:
        eval_cache = _FrozenBackboneCache(network, torch.from_numpy(np.stack([s.image for s in episode.eval_set]))) if backbone_frozen and episode.eval_set else None

        def evaluate_fn(net, epoch):
            if eval_cache is not None:
                return _evaluate_cached(net, eval_cache, episode.eval_set, fold, output_classes, num_classes, mode, episode.shots, ignore_value)
            return evaluate(net, episode.eval_set, fold, output_classes, num_classes, mode, episode.shots, ignore_value)

    best_state = None
    for epoch in range(1, config.epochs + 1):
        set_train_mode(network, config.freeze)
        rng = np.random.default_rng([config.seed, epoch])
        sums: dict[str, float] = {}
        batches = _batch_indices(len(images), config.batch_size, rng)
        for b, idx in enumerate(batches):
            idx = torch.from_numpy(idx)
            y = labels[idx]
            if train_cache is not None:
                out = network.head(train_cache.features[idx], None, train_cache.size)
            else:
                out = network(images[idx])
            terms = {"main": masked_cross_entropy(out.logits, y, ignore_value)}
            if config.regularizer == "none":
                loss = stage2_loss(terms["main"])
            else:
                reg = _regularizer(config, out.penultimate, y, len(output_classes), _sub_seed(config.seed, epoch, b), ignore_value)
                terms[config.regularizer] = reg
                loss = stage_loss_with_triplet(terms["main"], None, reg, config.weights, "ft")
            _check_finite(loss, record, epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["loss"] = sums.get("loss", 0.0) + float(loss.detach())
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
        n = len(batches)
        record.epochs.append(
            {
                "epoch": epoch,
                "loss": sums["loss"] / n,
                "components": {k: v / n for k, v in sums.items() if k != "loss"},
                "lr": opt.param_groups[0]["lr"],
            }
        )
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            report = evaluate_fn(network, epoch)
            record.evaluations.append({"epoch": epoch, "report": report.to_dict()})
            if record.best is None or report.total_miou > record.best["total_miou"]:
                record.best = {"epoch": epoch, "total_miou": report.total_miou}
                best_state = copy.deepcopy(network.state_dict())
    if best_state is not None:
        network.load_state_dict(best_state)
    network.eval()
    return network, record


def best_report(record: TrainRecord) -> EvalReport:
    for e in record.evaluations:
        if e["epoch"] == record.best["epoch"]:
            return EvalReport.from_dict(e["report"])
    raise LookupError("best epoch has no evaluation")


def state_checksum(network: SegNet) -> str:
    h = hashlib.sha256()
    for k, v in sorted(network.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().contiguous().numpy().tobytes())
    return h.hexdigest()
