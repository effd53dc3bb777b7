"""Toy PSPNet-style network with an explicit backbone/classifier split."""

from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1

BACKBONE = "backbone"
CLASSIFIER_BODY = "classifier.body"
CLASSIFIER_FINAL = "classifier.final"
AUX = "aux"


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class NetworkConfig:
    num_outputs: int
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    classifier_hidden: int = 64
    pooling_scales: list[int] = field(default_factory=lambda: [1, 2, 4])
    aux_tap: bool = True
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3

    def __post_init__(self):
        self.backbone_channels = list(self.backbone_channels)
        self.pooling_scales = list(self.pooling_scales)
        self.input_size = tuple(self.input_size)
        if self.num_outputs < 2:
            raise ConfigError("num_outputs must be >= 2")
        if not 3 <= len(self.backbone_channels) <= 4:
            raise ConfigError("backbone needs 3 or 4 blocks")
        if not self.pooling_scales:
            raise ConfigError("pooling_scales must be nonempty")
        fh, fw = self.feature_size
        for s in self.pooling_scales:
            if s < 1 or s > min(fh, fw):
                raise ConfigError(f"pooling scale {s} exceeds feature map {fh}x{fw}")

    @property
    def feature_size(self) -> tuple[int, int]:
        # three stride-2 blocks; a fourth block keeps resolution
        h, w = self.input_size
        return h // 8, w // 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


class FreezePolicy(str, Enum):
    NONE = "none"
    FREEZE_BACKBONE = "freeze_backbone"
    FREEZE_ALL_BUT_LAST = "freeze_all_but_last"


class ForwardResult(NamedTuple):
    logits: torch.Tensor
    penultimate: torch.Tensor
    aux_logits: torch.Tensor | None


def _conv_bn(cin, cout, stride=1, kernel=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class PyramidPooling(nn.Module):
    def __init__(self, channels: int, scales: list[int]):
        super().__init__()
        reduced = max(1, channels // len(scales))
        self.scales = list(scales)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(s), _conv_bn(channels, reduced, kernel=1))
            for s in scales
        )
        self.out_channels = channels + reduced * len(scales)

    def forward(self, x):
        h, w = x.shape[-2:]
        pooled = [
            F.interpolate(stage(x), size=(h, w), mode="bilinear", align_corners=False)
            for stage in self.stages
        ]
        return torch.cat([x] + pooled, dim=1)


class SegNet(nn.Module):
    """Backbone, pyramid-pooling classifier body, final 1x1 conv, optional aux head."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        chans = [config.in_channels] + config.backbone_channels
        blocks = []
        for i in range(len(config.backbone_channels)):
            stride = 2 if i < 3 else 1
            blocks.append(nn.Sequential(_conv_bn(chans[i], chans[i + 1], stride), _conv_bn(chans[i + 1], chans[i + 1])))
        self.backbone = nn.ModuleList(blocks)
        feat = config.backbone_channels[-1]
        ppm = PyramidPooling(feat, config.pooling_scales)
        self.body = nn.Sequential(ppm, _conv_bn(ppm.out_channels, config.classifier_hidden))
        self.final = nn.Conv2d(config.classifier_hidden, config.num_outputs, 1)
        self.aux = nn.Conv2d(config.backbone_channels[-2], config.num_outputs, 1) if config.aux_tap else None

    def forward(self, images: torch.Tensor) -> ForwardResult:
        if not torch.isfinite(images).all():
            raise NumericError("non-finite values in input batch")
        features, tap = self.features(images)
        return self.head(features, tap, images.shape[-2:])

    def features(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Backbone output and the aux-head tap one block earlier."""
        x = images
        tap = None
        for i, block in enumerate(self.backbone):
            x = block(x)
            if i == len(self.backbone) - 2:
                tap = x
        return x, tap

    def head(self, features: torch.Tensor, tap: torch.Tensor | None, size) -> ForwardResult:
        penultimate = self.body(features)
        logits = F.interpolate(self.final(penultimate), size=size, mode="bilinear", align_corners=False)
        aux_logits = None
        if self.aux is not None:
            aux_logits = F.interpolate(self.aux(tap), size=size, mode="bilinear", align_corners=False)
        return ForwardResult(logits, penultimate, aux_logits)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Every named parameter assigned to exactly one group."""
        groups: dict[str, list] = {BACKBONE: [], CLASSIFIER_BODY: [], CLASSIFIER_FINAL: [], AUX: []}
        for name, p in self.named_parameters():
            groups[group_of(name)].append((name, p))
        return groups

    def group_modules(self, group: str) -> list[nn.Module]:
        return {
            BACKBONE: [self.backbone],
            CLASSIFIER_BODY: [self.body],
            CLASSIFIER_FINAL: [self.final],
            AUX: [self.aux] if self.aux is not None else [],
        }[group]


def group_of(param_name: str) -> str:
    head = param_name.split(".", 1)[0]
    return {"backbone": BACKBONE, "body": CLASSIFIER_BODY, "final": CLASSIFIER_FINAL, "aux": AUX}[head]


def build_network(config: NetworkConfig, seed: int = 0) -> SegNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SegNet(config)
    return net


def forward(network: SegNet, images) -> ForwardResult:
    return network(torch.as_tensor(images, dtype=torch.float32))


# the aux head only serves Stage I and never counts as classifier
_TRAINABLE_GROUPS = {
    FreezePolicy.NONE: (BACKBONE, CLASSIFIER_BODY, CLASSIFIER_FINAL, AUX),
    FreezePolicy.FREEZE_BACKBONE: (CLASSIFIER_BODY, CLASSIFIER_FINAL),
    FreezePolicy.FREEZE_ALL_BUT_LAST: (CLASSIFIER_FINAL,),
}


def trainable_groups(policy) -> tuple[str, ...]:
    return _TRAINABLE_GROUPS[FreezePolicy(policy)]


def apply_freeze(network: SegNet, policy) -> list[nn.Parameter]:
    """Set ``requires_grad`` per policy and return the trainable parameters."""
    allowed = set(trainable_groups(policy))
    params = []
    for name, p in network.named_parameters():
        p.requires_grad_(group_of(name) in allowed)
        if p.requires_grad:
            params.append(p)
    return params


def set_train_mode(network: SegNet, policy) -> None:
    """Train mode for trainable groups; frozen groups keep BN statistics fixed."""
    network.train()
    allowed = set(trainable_groups(policy))
    for group in (BACKBONE, CLASSIFIER_BODY, CLASSIFIER_FINAL, AUX):
        if group not in allowed:
            for m in network.group_modules(group):
                m.eval()


def parameter_fraction(network: SegNet, policy) -> Fraction:
    """Trainable / total parameter count as an exact fraction."""
    allowed = set(trainable_groups(policy))
    total = trainable = 0
    for name, p in network.named_parameters():
        total += p.numel()
        if group_of(name) in allowed:
            trainable += p.numel()
    return Fraction(trainable, total)


def expand_classifier_outputs(network: SegNet, old_classes: int, new_classes: int, seed: int = 0) -> SegNet:
    """Grow the final layer to ``new_classes`` outputs.

    Rows for the first ``old_classes`` outputs are copied; the new rows come
    from a fresh default-initialized conv seeded with ``seed``.  The aux head
    is dropped since only base training uses it.
    """
    if new_classes <= old_classes:
        raise ValueError(f"cannot shrink or keep classifier ({old_classes} -> {new_classes})")
    if network.config.num_outputs != old_classes:
        raise ValueError(f"network has {network.config.num_outputs} outputs, not {old_classes}")
    cfg = NetworkConfig(**{**network.config.to_dict(), "num_outputs": new_classes, "aux_tap": False})
    grown = SegNet(cfg)
    state = {k: v for k, v in network.state_dict().items() if not k.startswith(("final.", "aux."))}
    grown.load_state_dict(state, strict=False)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        fresh = nn.Conv2d(cfg.classifier_hidden, new_classes, 1)
    with torch.no_grad():
        grown.final.weight.copy_(fresh.weight)
        grown.final.bias.copy_(fresh.bias)
        grown.final.weight[:old_classes] = network.final.weight
        grown.final.bias[:old_classes] = network.final.bias
    return grown


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(network: SegNet, path, **meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": network.config.to_dict(),
        "state": {f"{group_of(k)}:{k}" if not _is_buffer(network, k) else k: v.clone() for k, v in network.state_dict().items()},
        "meta": meta,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def _is_buffer(network: nn.Module, key: str) -> bool:
    return key not in dict(network.named_parameters())


def load_checkpoint(path, expected_config: NetworkConfig | None = None) -> tuple[SegNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = NetworkConfig(**payload["config"])
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        raise ConfigError(f"{path}: checkpoint config does not match the requested network")
    net = SegNet(config)
    state = {k.split(":", 1)[-1]: v for k, v in payload["state"].items()}
    net.load_state_dict(state)
    return net, payload.get("meta", {})
