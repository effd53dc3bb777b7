"""Command line front door: ``fsseg run|sweep|report|export-masks``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from fsseg.config import ConfigError, load_config
from fsseg.data import IGNORE_VALUE, DataError, SegmentationSample, load_dataset
from fsseg.evaluation import GFS_SEG_REFERENCE, METRICS, REFERENCE_LABEL, EvalReport, predict, reference_rows
from fsseg.model import load_checkpoint
from fsseg.pipeline import REPORT_FILE, SUMMARY_FILE, SWEEP_AXES, parse_sweep_values, prepare_dataset, run_pipeline, sweep

OUTPUT_ROOT_ENV = "FSSEG_OUTPUT_ROOT"

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("fsseg")


class UsageError(Exception):
    pass


def _output_root(cfg, override: str | None) -> Path:
    return Path(override or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


# --- masks -----------------------------------------------------------------


def palette() -> list[int]:
    """Fixed 256-entry palette: index i gets the VOC bit-interleaved color, 255 is white."""
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal.extend((r, g, b))
    pal[255 * 3 : 256 * 3] = [255, 255, 255]
    return pal


def mask_image(labels: np.ndarray) -> Image.Image:
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(palette())
    return im


def export_masks(network, samples: Sequence[SegmentationSample], output_classes, out_dir, ignore_value: int = IGNORE_VALUE) -> list[Path]:
    """Write one palette PNG of predicted classes per sample; ground-truth ignore pixels are white."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sample, pred in zip(samples, predict(network, samples, output_classes)):
        pred = pred.copy()
        pred[sample.labels == ignore_value] = IGNORE_VALUE
        path = out_dir / f"{sample.id}.png"
        mask_image(pred).save(path, optimize=False)
        paths.append(path)
    return paths


# --- report ----------------------------------------------------------------


def collect_reports(root: Path) -> dict[tuple[str, int], list[EvalReport]]:
    """(method, shots) -> reports found under ``root/<method>/<fold>/<shots>/<seed>/``."""
    found: dict[tuple[str, int], list[EvalReport]] = {}
    for path in sorted(root.glob(f"*/*/*/*/{REPORT_FILE}")):
        method, _fold, shots, _seed = path.relative_to(root).parts[:4]
        report = EvalReport.from_dict(json.loads(path.read_text()))
        found.setdefault((method, int(shots)), []).append(report)
    return found


def _mean(reports: list[EvalReport], metric: str) -> float:
    """Mean over folds and seeds; a single report passes through unchanged."""
    if len(reports) == 1:
        return getattr(reports[0], metric)
    return float(np.mean([getattr(r, metric) for r in reports]))


def build_report(root: Path) -> tuple[str, str]:
    found = collect_reports(root)
    if not found:
        raise UsageError(f"no {REPORT_FILE} files under {root}")
    methods = sorted({m for m, _ in found})
    shots = sorted({k for _, k in found})
    rows = []
    for m in methods:
        for k in shots:
            if (m, k) in found:
                rows.append({"method": m, "shots": k, "source": "run", **{x: _mean(found[(m, k)], x) for x in METRICS}})
    refs = []
    for dataset in GFS_SEG_REFERENCE:
        for r in reference_rows(dataset):
            if r["shots"] in shots:
                refs.append({**r, "method": f"{REFERENCE_LABEL} [{dataset}]", "source": "from paper"})

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "shots", "source", *METRICS])
    for r in rows:
        writer.writerow([r["method"], r["shots"], r["source"], *(repr(float(r[x])) for x in METRICS)])
    for r in refs:
        writer.writerow([r["method"], r["shots"], r["source"], *(f"{p:.2f}%" for p in r["percent"])])

    header = "| Method | " + " | ".join(f"{k}-shot base | {k}-shot novel | {k}-shot total" for k in shots) + " |"
    lines = ["# mIoU (%)", "", header, "|" + "---|" * (1 + 3 * len(shots))]
    for m in methods:
        cells = []
        for k in shots:
            r = next((r for r in rows if r["method"] == m and r["shots"] == k), None)
            cells += [f"{100 * r[x]:.2f}" if r else "" for x in METRICS]
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    for dataset in GFS_SEG_REFERENCE:
        cells = []
        for k in shots:
            vals = GFS_SEG_REFERENCE[dataset].get(k)
            cells += [f"{v:.2f}" for v in vals] if vals else ["", "", ""]
        if any(cells):
            lines.append(f"| {REFERENCE_LABEL} [{dataset}] | " + " | ".join(cells) + " |")
    lines += ["", "Rows marked \"from paper\" are cited reference values, not produced by this run."]
    return "\n".join(lines) + "\n", buf.getvalue()


# --- commands --------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _output_root(cfg, args.output)
    run_pipeline(cfg, out)
    print(out / SUMMARY_FILE)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown axis {args.axis!r}")
    out = _output_root(cfg, args.output)
    try:
        values = parse_sweep_values(args.axis, args.values)
    except ValueError as exc:
        raise UsageError(f"bad --values: {exc}") from exc
    table = sweep(cfg, args.axis, values, out)
    print(out / f"sweep_{args.axis}" / "sweep.csv")
    log.info("%d rows", len(table))
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    markdown, table = build_report(root)
    (root / "report.md").write_text(markdown)
    (root / "report.csv").write_text(table)
    print(markdown, end="")
    return EXIT_OK


def cmd_export_masks(args) -> int:
    network, meta = load_checkpoint(args.checkpoint)
    if "output_classes" not in meta:
        raise UsageError(f"{args.checkpoint} carries no class mapping; export needs a fine-tuned checkpoint")
    if args.dataset:
        train, val, spec = load_dataset(args.dataset)
    elif args.config:
        train, val, spec = prepare_dataset(load_config(args.config))
    else:
        raise UsageError("pass --dataset or --config to choose the images")
    samples = val if args.split == "val" else train
    if args.limit:
        samples = samples[: args.limit]
    paths = export_masks(network, samples, meta["output_classes"], args.dir, spec.ignore_value)
    print(f"wrote {len(paths)} masks to {args.dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output", help=f"output root (overrides ${OUTPUT_ROOT_ENV} and the config)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="repeat an experiment over one axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma separated; lambda_triplet takes base:ft pairs")
    p.add_argument("--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="tabulate reports under an output directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-masks", help="render predicted label maps as palette PNGs")
    p.add_argument("checkpoint")
    p.add_argument("dir", help="destination directory")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="paired-PNG dataset root")
    src.add_argument("--config", help="experiment config whose dataset to use")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_export_masks)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
