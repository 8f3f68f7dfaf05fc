"""Classification metrics: accuracy, recall, ROC AUC, loss, confusion matrix.

AUC is exact: per class it is the Mann-Whitney statistic
``P(score_pos > score_neg) + ½·P(tie)`` over all positive/negative pairs,
computed from average ranks. ``micro`` pools every (sample, class) pair,
``macro`` averages the per-class values.

Recall comes in two conventions. ``recall_threshold`` is the micro recall
where a class counts as predicted whenever its probability exceeds the
threshold; ``recall_macro`` averages per-class argmax recall. Micro argmax
recall would always equal accuracy for single-label data, which is why
the threshold form is the default.
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import rankdata

from ..errors import ConfigError, DataError, LabelError, NumericInputError, ShapeError, UndefinedClassError

CLASS_NAMES = (
    "adenocarcinoma",
    "large cell carcinoma",
    "squamous cell carcinoma",
    "normal",
)
PROB_CLAMP = 1e-12
_ROW_SUM_TOL = 1e-4

METRIC_NAMES = ("accuracy", "auc", "recall", "loss")


class MetricsConfig(BaseModel):
    """Which conventions the headline AUC and recall use."""
    model_config = ConfigDict(extra="forbid")

    auc_averaging: Literal["micro", "macro"] = "micro"
    recall_convention: Literal["threshold", "macro"] = "threshold"
    recall_threshold: float = Field(0.5, gt=0.0, lt=1.0)


@dataclass
class EvalBatch:
    probs: np.ndarray       # [n, k], rows sum to 1
    labels: np.ndarray      # [n] class indices

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.probs.ndim != 2 or self.probs.shape[1] < 2:
            raise ShapeError(f"probs must be [n,k] with k >= 2, got {list(self.probs.shape)}")
        if self.labels.shape != (self.probs.shape[0],):
            raise ShapeError(f"{self.labels.shape[0] if self.labels.ndim else 0} labels "
                             f"for {self.probs.shape[0]} probability rows")
        if self.labels.size:
            if not np.issubdtype(self.labels.dtype, np.integer):
                raise LabelError("labels must be integer class indices")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise LabelError(f"labels must lie in 0..{self.num_classes - 1}")
            sums = self.probs.sum(axis=1)
            if not np.all(np.abs(sums - 1.0) <= _ROW_SUM_TOL):
                raise NumericInputError("probability rows must sum to 1")

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def predictions(self) -> np.ndarray:
        # np.argmax keeps the lowest index among ties
        return np.argmax(self.probs, axis=1)

    def onehot(self) -> np.ndarray:
        return np.eye(self.num_classes, dtype=bool)[self.labels]


def _require_samples(batch: EvalBatch) -> None:
    if batch.n < 1:
        raise DataError("cannot compute metrics on an empty batch")


# ── Accuracy / recall ────────────────────────────────────────────────────

def accuracy(batch: EvalBatch) -> float:
    _require_samples(batch)
    return float(np.mean(batch.predictions() == batch.labels))


def recall_threshold(batch: EvalBatch, threshold: float = 0.5) -> float:
    """Micro recall ``TP / (TP + FN)`` with positives decided by ``probs > threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"recall threshold must lie in (0, 1), got {threshold}")
    _require_samples(batch)
    truth = batch.onehot()
    predicted = batch.probs > threshold
    tp = int(np.sum(truth & predicted))
    fn = int(np.sum(truth & ~predicted))
    return tp / (tp + fn)


def per_class_recall(batch: EvalBatch) -> List[Optional[float]]:
    """Argmax recall per class; ``None`` for classes absent from the batch."""
    preds = batch.predictions()
    out: List[Optional[float]] = []
    for j in range(batch.num_classes):
        members = batch.labels == j
        count = int(members.sum())
        out.append(float(np.sum(preds[members] == j)) / count if count else None)
    return out


def recall_macro(batch: EvalBatch) -> float:
    """Mean argmax recall over the classes present in the batch."""
    _require_samples(batch)
    present = [r for r in per_class_recall(batch) if r is not None]
    return float(np.mean(present))


# ── ROC AUC ──────────────────────────────────────────────────────────────

def mann_whitney_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """``U / (P·N)`` from average ranks; ties count one half."""
    p, q = len(pos), len(neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = float(np.sum(ranks[:p])) - p * (p + 1) / 2.0
    return u / (p * q)


def roc_curve(scores: np.ndarray, positives: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact ROC staircase ``(fpr, tpr, thresholds)``, one point per distinct score.

    Tied scores move along a diagonal segment, which is what makes the
    trapezoidal area equal the Mann-Whitney statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positives[order]

    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last_of_run = np.r_[np.diff(s) != 0, True]
    tps, fps, thresholds = tps[last_of_run], fps[last_of_run], s[last_of_run]

    tpr = np.r_[0.0, tps / max(int(y.sum()), 1)]
    fpr = np.r_[0.0, fps / max(int((~y).sum()), 1)]
    return fpr, tpr, np.r_[np.inf, thresholds]


def roc_auc_trapezoid(scores: np.ndarray, positives: np.ndarray) -> float:
    fpr, tpr, _ = roc_curve(scores, positives)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def per_class_auc(batch: EvalBatch) -> List[Optional[float]]:
    """One-vs-rest AUC per class; ``None`` where a class lacks positives or negatives."""
    truth = batch.onehot()
    out: List[Optional[float]] = []
    for j in range(batch.num_classes):
        pos = batch.probs[truth[:, j], j]
        neg = batch.probs[~truth[:, j], j]
        out.append(mann_whitney_auc(pos, neg) if len(pos) and len(neg) else None)
    return out


def roc_auc(batch: EvalBatch, averaging: str = "micro") -> float:
    _require_samples(batch)
    if averaging == "macro":
        per_class = per_class_auc(batch)
        undefined = [j for j, a in enumerate(per_class) if a is None]
        if undefined:
            names = ", ".join(f"{j} ({CLASS_NAMES[j] if j < len(CLASS_NAMES) else j})"
                              for j in undefined)
            raise UndefinedClassError(
                undefined, f"macro AUC undefined: no positives or no negatives for class {names}")
        return float(np.mean(per_class))
    if averaging == "micro":
        truth = batch.onehot().ravel()
        scores = batch.probs.ravel()
        if truth.all() or not truth.any():
            raise UndefinedClassError([], "micro AUC undefined: only one outcome present")
        return mann_whitney_auc(scores[truth], scores[~truth])
    raise ConfigError(f"unknown AUC averaging {averaging!r}; expected micro or macro")


# ── Loss / confusion ─────────────────────────────────────────────────────

def log_loss(batch: EvalBatch) -> float:
    """Mean negative log-probability of the true class, clamped at 1e-12."""
    _require_samples(batch)
    true_probs = batch.probs[np.arange(batch.n), batch.labels]
    losses = -np.log(np.maximum(true_probs, PROB_CLAMP))
    return float(np.mean(losses)) + 0.0     # no -0.0 for perfect predictions


def confusion_matrix(batch: EvalBatch) -> np.ndarray:
    """``[true][pred]`` counts of argmax predictions."""
    _require_samples(batch)
    k = batch.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (batch.labels, batch.predictions()), 1)
    return cm


# ── Report ───────────────────────────────────────────────────────────────

@dataclass
class MetricsReport:
    accuracy: float
    auc: float
    recall: float
    loss: float
    auc_micro: float
    auc_macro: Optional[float]
    recall_threshold: float
    recall_macro: float
    n: int
    confusion: List[List[int]]
    per_class: List[Dict] = field(default_factory=list)

    def headline(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self) -> Dict:
        return asdict(self)


def evaluate(probs: np.ndarray, labels: np.ndarray,
             cfg: Optional[MetricsConfig] = None) -> MetricsReport:
    """Compute every reported quantity for one split."""
    cfg = cfg or MetricsConfig()
    batch = EvalBatch(probs, labels)

    try:
        auc_macro: Optional[float] = roc_auc(batch, "macro")
    except UndefinedClassError:
        auc_macro = None
    auc_micro = roc_auc(batch, "micro")
    rec_thr = recall_threshold(batch, cfg.recall_threshold)
    rec_macro = recall_macro(batch)

    if cfg.auc_averaging == "macro":
        if auc_macro is None:
            roc_auc(batch, "macro")     # re-raise with the class list
        auc = auc_macro
    else:
        auc = auc_micro

    aucs = per_class_auc(batch)
    recalls = per_class_recall(batch)
    support = np.bincount(batch.labels, minlength=batch.num_classes)
    per_class = [
        {
            "class": j,
            "name": CLASS_NAMES[j] if j < len(CLASS_NAMES) else str(j),
            "support": int(support[j]),
            "recall": recalls[j],
            "auc": aucs[j],
        }
        for j in range(batch.num_classes)
    ]

    return MetricsReport(
        accuracy=accuracy(batch),
        auc=float(auc),
        recall=rec_thr if cfg.recall_convention == "threshold" else rec_macro,
        loss=log_loss(batch),
        auc_micro=auc_micro,
        auc_macro=auc_macro,
        recall_threshold=rec_thr,
        recall_macro=rec_macro,
        n=batch.n,
        confusion=confusion_matrix(batch).tolist(),
        per_class=per_class,
    )
