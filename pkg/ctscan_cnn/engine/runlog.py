"""RunLog: one JSON record per line.

Record kinds, in file order:

    {"kind": "run",   "run_id", "model", "fingerprint", "epochs", "seed"}
    {"kind": "epoch", "run_id", "epoch", "train": {...}, "val": {...}}   × epochs
    {"kind": "test",  "run_id", "epoch", "checkpoint", "test": {...}}

Metric blocks hold ``accuracy``, ``auc``, ``recall`` and ``loss``. Keys are
sorted and floats use ``repr`` so identical runs give identical bytes;
``wall_time`` / ``timestamp`` are written only with ``log_timing``.
"""

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from ..errors import ReportParseError
from .metrics import METRIC_NAMES, MetricsReport
from .train import EpochLog


def _dumps(record: Dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _block(log: EpochLog, split: str) -> Dict[str, float]:
    return {name: log.metric(split, name) for name in METRIC_NAMES}


class RunLogWriter:
    """Appends records and flushes after each line."""

    def __init__(self, path, run_id: str, log_timing: bool = False):
        self.path = Path(path)
        self.run_id = run_id
        self.log_timing = log_timing
        self.path.write_text("", encoding="utf-8")

    def _write(self, record: Dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(_dumps(record) + "\n")

    def write_header(self, model: str, fingerprint: str, epochs: int, seed: int) -> None:
        self._write({"kind": "run", "run_id": self.run_id, "model": model,
                     "fingerprint": fingerprint, "epochs": epochs, "seed": seed})

    def write_epoch(self, log: EpochLog) -> None:
        record = {"kind": "epoch", "run_id": self.run_id, "epoch": log.epoch,
                  "train": _block(log, "train"), "val": _block(log, "val")}
        if self.log_timing:
            record["wall_time"] = log.wall_time
            record["timestamp"] = datetime.now(timezone.utc).isoformat()
        self._write(record)

    def write_test(self, epoch: int, report: MetricsReport, checkpoint: str = "final") -> None:
        record = {"kind": "test", "run_id": self.run_id, "epoch": epoch,
                  "checkpoint": checkpoint, "test": report.headline()}
        if self.log_timing:
            record["timestamp"] = datetime.now(timezone.utc).isoformat()
        self._write(record)


@dataclass
class RunLogData:
    path: str
    header: Dict = field(default_factory=dict)
    epochs: List[EpochLog] = field(default_factory=list)
    test: Optional[Dict[str, float]] = None

    @property
    def model(self) -> str:
        return self.header.get("model", "CNN")

    def final_metrics(self, split: str) -> Optional[Dict[str, float]]:
        """Last-epoch train/val metrics, or the test record."""
        if split == "test":
            return self.test
        if not self.epochs:
            return None
        last = self.epochs[-1]
        return {name: last.metric(split, name) for name in METRIC_NAMES}


def _metric_block(record: Dict, key: str, source: str, line: int) -> Dict[str, float]:
    block = record.get(key)
    if not isinstance(block, dict):
        raise ReportParseError(source, line, f"missing '{key}' metrics")
    try:
        return {name: float(block[name]) for name in METRIC_NAMES}
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportParseError(source, line, f"bad '{key}' metrics: {exc}")


def read_runlog(path) -> RunLogData:
    path = Path(path)
    source = str(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ReportParseError(source, 0, f"cannot read: {exc}")

    data = RunLogData(path=source)
    for number, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ReportParseError(source, number, f"not a JSON record: {exc.msg}")
        if not isinstance(record, dict):
            raise ReportParseError(source, number, "record is not an object")

        kind = record.get("kind")
        if kind == "run":
            data.header = record
        elif kind == "epoch":
            epoch = record.get("epoch")
            if not isinstance(epoch, int):
                raise ReportParseError(source, number, "epoch record without an integer epoch")
            if data.epochs and epoch <= data.epochs[-1].epoch:
                raise ReportParseError(source, number, f"epoch {epoch} is not increasing")
            train = _metric_block(record, "train", source, number)
            val = _metric_block(record, "val", source, number)
            data.epochs.append(EpochLog(
                epoch=epoch,
                **{f"train_{k}": v for k, v in train.items()},
                **{f"val_{k}": v for k, v in val.items()},
                wall_time=float(record.get("wall_time", 0.0)),
            ))
        elif kind == "test":
            data.test = _metric_block(record, "test", source, number)
        else:
            raise ReportParseError(source, number, f"unknown record kind {kind!r}")
    return data
