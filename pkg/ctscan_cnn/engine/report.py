"""Result tables: training, validation and testing metrics per model.

Rows come from RunLogs (last epoch for train/val, the ``test`` record for
test) and from external CSV files with the columns
``model,split,accuracy,auc,recall,loss``. Values may be fractions or
percentages (``84.13%``). Duplicate model names within a split get a
`` (2)``, `` (3)``… suffix in input order.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from ..errors import ReportParseError
from .metrics import METRIC_NAMES
from .runlog import RunLogData

logger = logging.getLogger(__name__)

PUBLISHED_RESULTS = Path(__file__).resolve().parent.parent / "data" / "published_results.csv"

SPLITS = ("train", "val", "test")
SPLIT_TITLES = {"train": "Training", "val": "Validation", "test": "Testing"}
_SPLIT_ALIASES = {
    "train": "train", "training": "train",
    "val": "val", "valid": "val", "validation": "val",
    "test": "test", "testing": "test",
}
CSV_COLUMNS = ("model", "split") + METRIC_NAMES


@dataclass
class ReportRow:
    model: str
    split: str
    accuracy: float
    auc: float
    recall: float
    loss: float

    def metric(self, name: str) -> float:
        return getattr(self, name)


# ── Inputs ───────────────────────────────────────────────────────────────

def rows_from_runlog(data: RunLogData) -> List[ReportRow]:
    rows = []
    for split in SPLITS:
        values = data.final_metrics(split)
        if values is None:
            logger.debug("%s has no %s metrics", data.path, split)
            continue
        rows.append(ReportRow(model=data.model, split=split, **values))
    return rows


def _parse_value(text: str, column: str, source: str, line: int) -> float:
    raw = (text or "").strip()
    if not raw:
        raise ReportParseError(source, line, f"empty '{column}' value")
    scale = 1.0
    if raw.endswith("%"):
        raw, scale = raw[:-1].strip(), 0.01
    try:
        value = float(raw) * scale
    except ValueError:
        raise ReportParseError(source, line, f"'{column}' is not a number: {text!r}")
    if not math.isfinite(value):
        raise ReportParseError(source, line, f"'{column}' is not finite")
    return value


def read_extern_rows(path) -> List[ReportRow]:
    """Parse an external metrics CSV; every problem names file and line."""
    path = Path(path)
    source = str(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportParseError(source, 0, f"cannot read: {exc}")

    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ReportParseError(source, 1, f"missing columns {missing}")

    rows = []
    for row in reader:
        line = reader.line_num
        model = (row.get("model") or "").strip()
        if not model:
            raise ReportParseError(source, line, "empty model name")
        split = _SPLIT_ALIASES.get((row.get("split") or "").strip().lower())
        if split is None:
            raise ReportParseError(source, line, f"unknown split {row.get('split')!r}")
        values = {name: _parse_value(row.get(name), name, source, line) for name in METRIC_NAMES}
        rows.append(ReportRow(model=model, split=split, **values))
    return rows


def disambiguate(rows: Iterable[ReportRow]) -> List[ReportRow]:
    seen: Dict[tuple, int] = {}
    out = []
    for row in rows:
        key = (row.model, row.split)
        seen[key] = seen.get(key, 0) + 1
        if seen[key] > 1:
            row = replace(row, model=f"{row.model} ({seen[key]})")
        out.append(row)
    return out


# ── Output ───────────────────────────────────────────────────────────────

def _pct(value: float) -> str:
    return f"{value * 100:.2f}%"


def render_tables(rows: Sequence[ReportRow]) -> str:
    """One plain-text table per split present, in train/val/test order."""
    blocks = []
    for split in SPLITS:
        part = [r for r in rows if r.split == split]
        if not part:
            continue
        title = SPLIT_TITLES[split]
        header = ["Models"] + [f"{title} {name}" for name in ("Accuracy", "AUC", "Recall", "Loss")]
        body = [[r.model, _pct(r.accuracy), _pct(r.auc), _pct(r.recall), f"{r.loss:.4f}"] for r in part]
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

        def fmt(cells: List[str]) -> str:
            first = cells[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            return "  ".join([first] + rest)

        lines = [f"{title} results", fmt(header), "  ".join("-" * w for w in widths)]
        lines += [fmt(line) for line in body]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.model, r.split] + [repr(float(r.metric(name))) for name in METRIC_NAMES])
    return buf.getvalue()


def build_report(runlogs: Sequence[RunLogData],
                 extern_paths: Optional[Sequence] = None) -> List[ReportRow]:
    rows: List[ReportRow] = []
    for data in runlogs:
        rows.extend(rows_from_runlog(data))
    for path in extern_paths or []:
        rows.extend(read_extern_rows(path))
    return disambiguate(rows)
