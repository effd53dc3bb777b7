"""Generalized few-shot semantic segmentation by two-stage fine-tuning."""

from fsseg.data import (
    DatasetSpec,
    Episode,
    FoldSpec,
    SegmentationSample,
    generate_synthetic_dataset,
    load_dataset,
    make_fold,
    sample_episode,
)
from fsseg.evaluation import ConfusionAccumulator, EvalReport
from fsseg.model import FreezePolicy, NetworkConfig, SegNet, build_network

__version__ = "0.1.0"

__all__ = [
    "ConfusionAccumulator",
    "DatasetSpec",
    "Episode",
    "EvalReport",
    "FoldSpec",
    "FreezePolicy",
    "NetworkConfig",
    "SegNet",
    "SegmentationSample",
    "build_network",
    "generate_synthetic_dataset",
    "load_dataset",
    "make_fold",
    "sample_episode",
]
