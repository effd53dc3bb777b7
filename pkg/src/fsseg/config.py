"""Experiment configuration files (TOML, schema version 1)."""

from __future__ import annotations

import re
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from fsseg.data import EVAL_MODES, GENERALIZED
from fsseg.losses import LossWeights
from fsseg.model import FreezePolicy
from fsseg.train import StageConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment config; ``line`` points into the file when known."""

    def __init__(self, message, path=None, line=None):
        self.path, self.line = path, line
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)


@dataclass(frozen=True)
class MethodSpec:
    stage1_regularizer: str
    stage2_regularizer: str
    freeze: FreezePolicy


METHODS = {
    "vanilla": MethodSpec("none", "none", FreezePolicy.FREEZE_BACKBONE),
    "objdet_ft": MethodSpec("none", "none", FreezePolicy.FREEZE_ALL_BUT_LAST),
    "triplet_ft": MethodSpec("none", "triplet", FreezePolicy.FREEZE_BACKBONE),
    "triplet_all": MethodSpec("triplet", "triplet", FreezePolicy.FREEZE_BACKBONE),
    "trip_base_ft_last": MethodSpec("triplet", "none", FreezePolicy.FREEZE_ALL_BUT_LAST),
    "cosine": MethodSpec("none", "cosine", FreezePolicy.FREEZE_BACKBONE),
}


@dataclass
class DatasetRef:
    source: str = "synthetic"  # "synthetic" or a directory path
    num_classes: int = 8
    images: int = 200
    size: tuple[int, int] = (64, 64)
    seed: int = 1
    val_fraction: float = 0.25

    @property
    def is_synthetic(self) -> bool:
        return self.source == "synthetic"


@dataclass
class ExperimentConfig:
    methods: list[str]
    dataset: DatasetRef = field(default_factory=DatasetRef)
    folds: list[int] = field(default_factory=lambda: [0])
    shots: list[int] = field(default_factory=lambda: [1])
    seeds: list[int] = field(default_factory=lambda: [0])
    ratio_shift: int = 0
    eval_mode: str = GENERALIZED
    output_dir: str = "out"
    workers: int = 1
    network: dict = field(default_factory=dict)
    stage1: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    confidence: dict = field(default_factory=dict)

    def weights(self) -> LossWeights:
        return LossWeights(**self.loss)

    def stage_config(self, stage: str, method: str, seed: int) -> StageConfig:
        spec = METHODS[method]
        if stage == "base":
            params = {"epochs": 20, "eval_every": 1, **self.stage1}
            return StageConfig("base", freeze=FreezePolicy.NONE, regularizer=spec.stage1_regularizer, weights=self.weights(), seed=seed, **params)
        params = {"epochs": 100, "eval_every": 10, **self.stage2}
        return StageConfig("finetune", freeze=spec.freeze, regularizer=spec.stage2_regularizer, weights=self.weights(), seed=seed, **params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["size"] = list(self.dataset.size)
        return d


_STAGE_KEYS = {"epochs", "batch_size", "lr", "lr_decay", "momentum", "eval_every"}
_NETWORK_KEYS = {"backbone_channels", "classifier_hidden", "pooling_scales"}
_LOSS_KEYS = {"lambda_aux", "lambda_triplet_base", "lambda_triplet_ft", "margin", "tau"}
_CONFIDENCE_KEYS = {"enabled", "sample_cap"}
_TOP_KEYS = {"schema_version", "method", "folds", "shots", "seeds", "ratio_shift", "eval_mode", "output_dir", "workers",
             "dataset", "network", "stage1", "stage2", "loss", "confidence"}


def _line_of(text: str, key: str) -> int | None:
    pattern = re.compile(rf"^\s*\[?\s*{re.escape(key)}\s*[=\]]")
    for i, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return i
    return None


def parse_config(text: str, path=None) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc), path, getattr(exc, "lineno", None)) from exc

    def fail(key, message):
        raise ConfigError(message, path, _line_of(text, key))

    for key in raw:
        if key not in _TOP_KEYS:
            fail(key, f"unknown key {key!r}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        fail("schema_version", f"unsupported schema_version {version}")

    methods = raw.get("method")
    if methods is None:
        raise ConfigError("missing required key 'method'", path)
    methods = [methods] if isinstance(methods, str) else list(methods)
    for m in methods:
        if m not in METHODS:
            fail("method", f"unknown method {m!r}; expected one of {', '.join(METHODS)}")

    def int_list(key, default, minimum=None):
        value = raw.get(key, default)
        if not isinstance(value, list) or not value or not all(isinstance(v, int) for v in value):
            fail(key, f"{key} must be a nonempty list of integers")
        if minimum is not None and min(value) < minimum:
            fail(key, f"{key} values must be >= {minimum}")
        return value

    folds = int_list("folds", [0], 0)
    shots = int_list("shots", [1], 1)
    seeds = int_list("seeds", [0])
    mode = raw.get("eval_mode", GENERALIZED)
    if mode not in EVAL_MODES:
        fail("eval_mode", f"unknown eval_mode {mode!r}")

    def section(name, allowed):
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            fail(name, f"[{name}] must be a table")
        for key in sec:
            if key not in allowed:
                fail(key, f"unknown key {key!r} in [{name}]")
        return dict(sec)

    ds = section("dataset", {"source", "path", "num_classes", "images", "size", "seed", "val_fraction"})
    if "path" in ds:
        ds["source"] = str(ds.pop("path"))
    if "size" in ds:
        ds["size"] = tuple(ds["size"])
    dataset = DatasetRef(**ds)
    if not dataset.is_synthetic and path is not None:
        src = Path(dataset.source)
        if not src.is_absolute():
            dataset.source = str((Path(path).parent / src).resolve())

    cfg = ExperimentConfig(
        methods=methods,
        dataset=dataset,
        folds=folds,
        shots=shots,
        seeds=seeds,
        ratio_shift=int(raw.get("ratio_shift", 0)),
        eval_mode=mode,
        output_dir=str(raw.get("output_dir", "out")),
        workers=int(raw.get("workers", 1)),
        network=section("network", _NETWORK_KEYS),
        stage1=section("stage1", _STAGE_KEYS),
        stage2=section("stage2", _STAGE_KEYS),
        loss=section("loss", _LOSS_KEYS),
        confidence=section("confidence", _CONFIDENCE_KEYS),
    )
    try:
        cfg.weights()
        for m in methods:
            cfg.stage_config("base", m, 0)
            cfg.stage_config("finetune", m, 0)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from exc
    return parse_config(text, path)
