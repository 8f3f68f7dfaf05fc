import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env from project root (same dir as this package's parent)
_env_path = Path(__file__).resolve().parent.parent / ".env"
load_dotenv(_env_path)

# Single-threaded BLAS keeps the reduction order, and so the results, fixed.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from typing import List, Optional

import numpy as np

from . import __version__
from .errors import CtscanError, NumericInputError, UsageError
from .log import setup_logging
from .engine.checkpoint import checkpoint_load, checkpoint_save
from .engine.data import DatasetSplit, load_samples, scan_dataset, split_holdout
from .engine.layers import check_params
from .engine.metrics import CLASS_NAMES, METRIC_NAMES, MetricsReport
from .engine.plot import comparison_svg, curve_svg
from .engine.report import PUBLISHED_RESULTS, build_report, render_tables, rows_to_csv
from .engine.run_config import RunConfig, load_run_config
from .engine.runlog import RunLogWriter, read_runlog
from .engine.rng import make_rng
from .engine.train import evaluate_split, fit, gradient_check, init_params

logger = logging.getLogger("ctscan_cnn")

MODEL_NAME = "CNN"
GRADIENT_TOLERANCE = 1e-3


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad arguments; usage errors here are 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ── Shared helpers ───────────────────────────────────────────────────────

def _abs(path: Optional[str]) -> Optional[str]:
    return str(Path(path).resolve()) if path else None


def _load_config(args) -> RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "data_root": _abs(getattr(args, "data_dir", None)),
        "output_dir": _abs(getattr(args, "out", None)),
    }
    cfg = load_run_config(args.config, overrides)
    logger.info("Config %s (fingerprint %s…)", args.config, cfg.fingerprint()[:12])
    return cfg


def _prepare_data(cfg: RunConfig) -> DatasetSplit:
    entries = scan_dataset(cfg.data_root, cfg.class_map)
    logger.info("Found %d images under %s", len(entries), cfg.data_root)
    cache_dir = cfg.output_dir / "cache" if cfg.cache else None
    samples = load_samples(cfg.data_root, entries, cfg.preprocess, cfg.workers, cache_dir)
    splits = split_holdout(samples, cfg.split_ratios, seed=cfg.train.seed)
    logger.info("Split train/val/test = %d/%d/%d", *splits.sizes())
    return splits


@contextmanager
def _run_lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        with open(lock, "x", encoding="utf-8") as f:
            f.write(str(os.getpid()))
    except FileExistsError:
        raise UsageError(f"{out_dir} is locked by another run (remove {lock} if stale)")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _format_report(report: MetricsReport, split: str) -> str:
    lines = [f"{split} split, {report.n} samples"]
    for name in METRIC_NAMES:
        lines.append(f"  {name:<10} {getattr(report, name):.6f}")
    macro = "undefined" if report.auc_macro is None else f"{report.auc_macro:.6f}"
    lines.append(f"  auc micro {report.auc_micro:.6f}  macro {macro}")
    lines.append(f"  recall threshold {report.recall_threshold:.6f}  macro {report.recall_macro:.6f}")
    lines.append("  confusion (rows true, columns predicted):")
    for row in report.confusion:
        lines.append("    " + " ".join(f"{c:5d}" for c in row))
    for entry in report.per_class:
        auc = "-" if entry["auc"] is None else f"{entry['auc']:.4f}"
        recall = "-" if entry["recall"] is None else f"{entry['recall']:.4f}"
        lines.append(f"  {entry['name']:<26} n={entry['support']:<4d} recall {recall}  auc {auc}")
    return "\n".join(lines)


# ── Commands ─────────────────────────────────────────────────────────────

def _check_gradients(splits: DatasetSplit, spec, seed: int) -> None:
    """Central differences on two training images, float64, away from ReLU kinks."""
    rng = make_rng(seed, "init")
    params = init_params(spec, rng, np.float64)
    for name in params:
        if name.endswith(".bias"):
            params[name] = rng.uniform(-0.1, 0.1, size=params[name].shape)
    sample = splits.train[:2]
    x = np.stack([s.pixels for s in sample]).astype(np.float64)
    onehot = np.eye(spec.num_classes)[[s.label for s in sample]]
    errors = gradient_check(params, x, onehot, spec, max_entries=8, rng=rng)
    worst = max(errors.values())
    for name, err in errors.items():
        logger.debug("gradient check %-14s %.2e", name, err)
    if worst > GRADIENT_TOLERANCE:
        raise NumericInputError(f"gradient check failed: max relative error {worst:.2e}")
    logger.info("Gradient check passed (max relative error %.2e)", worst)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    cfg.check_paths()
    spec = cfg.model_spec()
    dtype = np.dtype(cfg.model.dtype)
    splits = _prepare_data(cfg)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with _run_lock(out):
        fingerprint = cfg.fingerprint()
        if args.check_gradients:
            _check_gradients(splits, spec, cfg.train.seed)

        writer = RunLogWriter(out / "runlog.jsonl", run_id=fingerprint[:16], log_timing=cfg.log_timing)
        writer.write_header(MODEL_NAME, fingerprint, cfg.train.epochs, cfg.train.seed)
        result = fit(spec, splits, cfg.train, cfg.metrics, dtype=dtype,
                     on_epoch=writer.write_epoch,
                     progress=False if args.no_progress else None)

        checkpoint_save(result.best_params, out / "best.ckpt", fingerprint)
        checkpoint_save(result.params, out / "final.ckpt", fingerprint)
        logger.info("Best epoch %d (val accuracy %.4f)", result.best_epoch,
                    result.logs[result.best_epoch - 1].val_accuracy)

        if splits.test:
            report = evaluate_split(result.params, splits.test, spec, cfg.metrics)
            writer.write_test(cfg.train.epochs, report, checkpoint="final")
            print(_format_report(report, "test"))
        else:
            logger.warning("Test split is empty; no test record written")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    cfg.check_paths()
    spec = cfg.model_spec()
    ckpt = checkpoint_load(args.checkpoint, expected_fingerprint=cfg.fingerprint())
    check_params(ckpt.params, spec)

    splits = _prepare_data(cfg)
    report = evaluate_split(ckpt.params, splits.part(args.split), spec, cfg.metrics)
    print(_format_report(report, args.split))

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    payload = {"split": args.split, "checkpoint": str(args.checkpoint),
               "class_names": list(CLASS_NAMES), **report.to_dict()}
    (out / f"metrics_{args.split}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_report(args) -> int:
    extern = list(args.extern or [])
    if args.published:
        extern.append(PUBLISHED_RESULTS)
    if not args.runlogs and not extern:
        raise UsageError("report needs at least one RunLog or --extern/--published rows")

    rows = build_report([read_runlog(p) for p in args.runlogs], extern)
    print(render_tables(rows), end="")
    if args.csv:
        Path(args.csv).write_text(rows_to_csv(rows), encoding="utf-8")
        logger.info("Wrote %s", args.csv)
    if args.svg:
        Path(args.svg).write_text(comparison_svg(rows), encoding="utf-8")
        logger.info("Wrote %s", args.svg)
    return 0


def cmd_plot(args) -> int:
    data = read_runlog(args.runlog)
    svg = curve_svg(data.epochs, args.metric)
    Path(args.out).write_text(svg, encoding="utf-8")
    logger.info("Wrote %s (%d epochs)", args.out, len(data.epochs))
    return 0


# ── Entry point ──────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctscan-cnn", description="Lung CT scan CNN: train, evaluate, report, plot.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="train a model from a config file")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--data-dir")
    train.add_argument("--out")
    train.add_argument("--no-progress", action="store_true", help="hide the batch progress bar")
    train.add_argument("--check-gradients", action="store_true",
                       help="compare analytic and numeric gradients before training")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--split", choices=("train", "val", "test"), default="test")
    evaluate.add_argument("--data-dir")
    evaluate.add_argument("--out")
    evaluate.set_defaults(func=cmd_evaluate)

    report = sub.add_parser("report", help="tabulate RunLogs and external result rows")
    report.add_argument("runlogs", nargs="*")
    report.add_argument("--extern", action="append", help="CSV with model,split,accuracy,auc,recall,loss")
    report.add_argument("--published", action="store_true", help="include the bundled published baselines")
    report.add_argument("--csv", help="write the rows as CSV")
    report.add_argument("--svg", help="write a testing comparison bar chart")
    report.set_defaults(func=cmd_report)

    plot = sub.add_parser("plot", help="draw a training/validation curve as SVG")
    plot.add_argument("--runlog", required=True)
    plot.add_argument("--metric", required=True, help=f"one of {', '.join(METRIC_NAMES)}")
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.verbose)
        return args.func(args)
    except CtscanError as exc:
        logger.error("%s", exc.detail)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
