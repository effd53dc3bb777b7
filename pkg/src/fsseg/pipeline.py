"""End-to-end experiment runs: base training (cached), head expansion, episodes, fine-tuning."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from fsseg.config import ExperimentConfig
from fsseg.data import GENERALIZED, DatasetSpec, FoldSpec, generate_synthetic_dataset, load_dataset, make_fold, sample_episode
from fsseg.evaluation import METRICS, EvalReport, confidence_analysis, confidence_plot_csv, cross_fold_average
from fsseg.model import NetworkConfig, build_network, expand_classifier_outputs, load_checkpoint, save_checkpoint
from fsseg.train import TrainRecord, best_report, state_checksum, train_stage1, train_stage2

log = logging.getLogger(__name__)

STAGE1_CACHE = "_stage1_cache"
REPORT_FILE = "report.json"
RECORD_FILE = "train_record.jsonl"
MODEL_FILE = "model.pt"
SUMMARY_FILE = "summary.csv"
RUNS_FILE = "runs.csv"
FOLDS_FILE = "folds.csv"


@dataclass
class RunResult:
    method: str
    fold: int
    shots: int
    seed: int
    report: EvalReport
    stage1: TrainRecord
    stage2: TrainRecord
    run_dir: Path


@lru_cache(maxsize=4)
def _synthetic(num_classes, images, size, seed, val_fraction):
    return generate_synthetic_dataset(num_classes, images, tuple(size), seed, val_fraction)


def prepare_dataset(cfg: ExperimentConfig):
    ref = cfg.dataset
    if ref.is_synthetic:
        return _synthetic(ref.num_classes, ref.images, tuple(ref.size), ref.seed, ref.val_fraction)
    return load_dataset(ref.source)


def network_config(cfg: ExperimentConfig, num_outputs: int, input_size) -> NetworkConfig:
    return NetworkConfig(num_outputs=num_outputs, input_size=tuple(input_size), aux_tap=True, **cfg.network)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def stage1_key(cfg: ExperimentConfig, method: str, fold: FoldSpec, seed: int, input_size) -> str:
    """Identity of a base-training run; shot count and Stage II settings do not enter."""
    stage = cfg.stage_config("base", method, seed)
    return _digest(
        {
            "dataset": cfg.to_dict()["dataset"],
            "fold": fold.to_dict(),
            "seed": seed,
            "stage1": stage.to_dict(),
            "network": network_config(cfg, len(fold.output_classes("base")), input_size).to_dict(),
        }
    )


def get_stage1(cfg, method, fold: FoldSpec, seed, train, spec: DatasetSpec, out_root: Path):
    """Return the base-trained network, training it only on a cache miss."""
    input_size = train[0].labels.shape
    key = stage1_key(cfg, method, fold, seed, input_size)
    ckpt = out_root / STAGE1_CACHE / f"{key}.pt"
    net_cfg = network_config(cfg, len(fold.output_classes("base")), input_size)
    if ckpt.is_file():
        network, meta = load_checkpoint(ckpt, expected_config=net_cfg)
        record = TrainRecord("base", **meta["record"])
        record.provenance = {**record.provenance, "cache": "hit"}
        return network, record
    network = build_network(net_cfg, seed)
    network, record = train_stage1(network, train, fold, cfg.stage_config("base", method, seed), spec.num_classes, spec.ignore_value)
    record.provenance = {"cache": "miss", "key": key, "checksum": state_checksum(network)}
    saved = {"epochs": record.epochs, "evaluations": record.evaluations, "best": record.best, "provenance": {"key": key, "checksum": record.provenance["checksum"]}}
    save_checkpoint(network, ckpt, record=saved)
    return network, record


def run_dir(out_root: Path, method: str, fold: int, shots: int, seed: int) -> Path:
    return out_root / method / str(fold) / str(shots) / str(seed)


def _run_group(cfg: ExperimentConfig, method: str, fold_index: int, seed: int, out_root: Path) -> list[RunResult]:
    """All shot settings for one (method, fold, seed), sharing one base-trained network."""
    train, val, spec = prepare_dataset(cfg)
    fold = make_fold(spec, fold_index, cfg.ratio_shift)
    base_net, rec1 = get_stage1(cfg, method, fold, seed, train, spec, out_root)
    n_base, n_all = len(fold.output_classes("base")), len(fold.output_classes("finetune"))
    results = []
    for shots in cfg.shots:
        # novel-only runs draw shots for background and novel classes only
        classes = None if cfg.eval_mode == GENERALIZED else (0,) + fold.novel_classes
        episode = sample_episode(train, fold, shots, seed, eval_set=val, ignore_value=spec.ignore_value, classes=classes)
        net = expand_classifier_outputs(base_net, n_base, n_all, seed)
        stage2 = cfg.stage_config("finetune", method, seed)
        net, rec2 = train_stage2(net, episode, fold, stage2, spec.num_classes, cfg.eval_mode, spec.ignore_value)
        rec2.provenance = {"stage1_cache": rec1.provenance["cache"], "stage1_checksum": rec1.provenance["checksum"], "stage1_key": rec1.provenance["key"]}
        report = best_report(rec2)
        report.shots = shots

        out = run_dir(out_root, method, fold_index, shots, seed)
        out.mkdir(parents=True, exist_ok=True)
        if cfg.confidence.get("enabled", False):
            stats = confidence_analysis(net, val, fold, fold.output_classes("finetune"), cfg.confidence.get("sample_cap", 100_000), seed, spec.ignore_value)
            report.confidence_stats = stats
            (out / "confidence.csv").write_text(confidence_plot_csv({f"{method}/{fold_index}/{shots}/{seed}": stats}))
        (out / REPORT_FILE).write_text(report.to_json())
        (out / RECORD_FILE).write_text(rec1.to_jsonl() + rec2.to_jsonl())
        save_checkpoint(
            net,
            out / MODEL_FILE,
            output_classes=list(fold.output_classes("finetune")),
            fold=fold.to_dict(),
            num_classes=spec.num_classes,
            ignore_value=spec.ignore_value,
        )
        log.info("%s fold %d %d-shot seed %d: total mIoU %.4f", method, fold_index, shots, seed, report.total_miou)
        results.append(RunResult(method, fold_index, shots, seed, report, rec1, rec2, out))
    return results


def _run_group_star(args):
    return _run_group(*args)


def run_pipeline(cfg: ExperimentConfig, out_root=None) -> list[RunResult]:
    """Run every (method, fold, seed) group; returns results in a fixed order."""
    out_root = Path(out_root or cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, m, f, s, out_root) for m in cfg.methods for f in cfg.folds for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        # methods sharing a Stage I key may both train it; writes are atomic and identical
        with ProcessPoolExecutor(cfg.workers) as pool:
            groups = list(pool.map(_run_group_star, jobs))
    else:
        groups = [_run_group(*job) for job in jobs]
    results = [r for g in groups for r in g]
    write_summary(results, out_root)
    return results


# --- summaries -------------------------------------------------------------


def _num(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def aggregate(results: list[RunResult]) -> list[dict]:
    """Per (method, shots): cross-fold average for each seed, then mean over seeds."""
    rows = []
    keys = sorted({(r.method, r.shots) for r in results})
    for method, shots in keys:
        subset = [r for r in results if r.method == method and r.shots == shots]
        seeds = sorted({r.seed for r in subset})
        per_seed = [cross_fold_average([r.report for r in subset if r.seed == s])["mean"] for s in seeds]
        rows.append(
            {
                "method": method,
                "shots": shots,
                "folds": " ".join(str(f) for f in sorted({r.fold for r in subset})),
                "seeds": len(seeds),
                **{m: float(np.mean([p[m] for p in per_seed])) for m in METRICS},
            }
        )
    return rows


def _csv(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _num(v) if k in METRICS else v for k, v in row.items() if k in fields})
    return buf.getvalue()


def write_summary(results: list[RunResult], out_root: Path) -> Path:
    out_root = Path(out_root)
    rows = aggregate(results)
    (out_root / SUMMARY_FILE).write_text(_csv(rows, ["method", "shots", "folds", "seeds", *METRICS]))
    runs = [
        {"method": r.method, "fold": r.fold, "shots": r.shots, "seed": r.seed, "best_epoch": r.stage2.best["epoch"], **{m: getattr(r.report, m) for m in METRICS}}
        for r in results
    ]
    (out_root / RUNS_FILE).write_text(_csv(runs, ["method", "fold", "shots", "seed", "best_epoch", *METRICS]))
    folds = []
    for method in sorted({r.method for r in results}):
        for shots in sorted({r.shots for r in results if r.method == method}):
            subset = [r for r in results if r.method == method and r.shots == shots]
            for fold in sorted({r.fold for r in subset}):
                reps = [r.report for r in subset if r.fold == fold]
                folds.append({"method": method, "shots": shots, "fold": fold, **{m: float(np.mean([getattr(x, m) for x in reps])) for m in METRICS}})
    (out_root / FOLDS_FILE).write_text(_csv(folds, ["method", "shots", "fold", *METRICS]))
    return out_root / SUMMARY_FILE


# --- sweeps ----------------------------------------------------------------

SWEEP_AXES = ("lr", "lambda_triplet", "shots", "ratio_shift")


def parse_sweep_values(axis: str, values: str | list) -> list:
    items = values.split(",") if isinstance(values, str) else list(values)
    items = [str(v).strip() for v in items if str(v).strip()]
    if axis == "lr":
        return [float(v) for v in items]
    if axis in ("shots", "ratio_shift"):
        return [int(v) for v in items]
    if axis == "lambda_triplet":
        pairs = []
        for v in items:
            base, _, ft = v.partition(":")
            pairs.append((float(base), float(ft or base)))
        return pairs
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")


def _with_value(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "lr":
        return replace(cfg, stage1={**cfg.stage1, "lr": value}, stage2={**cfg.stage2, "lr": value})
    if axis == "shots":
        return replace(cfg, shots=[value])
    if axis == "ratio_shift":
        return replace(cfg, ratio_shift=value)
    base, ft = value
    return replace(cfg, loss={**cfg.loss, "lambda_triplet_base": base, "lambda_triplet_ft": ft})


def _label(axis, value) -> str:
    if axis == "lambda_triplet":
        return f"{value[0]:g}:{value[1]:g}"
    return f"{value:g}" if isinstance(value, float) else str(value)


def sweep(cfg: ExperimentConfig, axis: str, values, out_root=None) -> list[dict]:
    """One table row per (value, method, shots) with seed-averaged cross-fold mIoU."""
    values = parse_sweep_values(axis, values) if isinstance(values, str) else values
    out_root = Path(out_root or cfg.output_dir) / f"sweep_{axis}"
    table = []
    for value in values:
        label = _label(axis, value)
        results = run_pipeline(_with_value(cfg, axis, value), out_root / label)
        for row in aggregate(results):
            if axis == "lambda_triplet":
                row = {"lambda_bt": value[0], "lambda_ft": value[1], **row}
            else:
                row = {axis: label, **row}
            table.append(row)
    fields = (["lambda_bt", "lambda_ft"] if axis == "lambda_triplet" else [axis]) + ["method", "shots", "folds", "seeds", *METRICS]
    (out_root / "sweep.csv").write_text(_csv(table, fields))
    return table
