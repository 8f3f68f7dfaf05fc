"""Training: loss, Adam, initialization, the epoch loop and ``fit``.

Defaults reproduce the reference run: Adam with learning rate 0.01,
50 epochs, batches of 13, seed 1000. Adam constants (β1 0.9, β2 0.999,
ε 1e-7) and Glorot-uniform initialization with zero biases follow the
usual framework defaults.
"""

import copy
import logging
import sys
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from ..errors import DataError, LabelError, ShapeError
from .data import DatasetSplit, Sample, batches
from .layers import ModelParams, ModelSpec, model_backward, model_forward
from .metrics import EvalBatch, MetricsConfig, MetricsReport, evaluate, log_loss
from .rng import Rng, make_rng

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(0.01, gt=0.0)
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(13, ge=1)
    seed: int = Field(1000, ge=0)
    beta1: float = Field(0.9, gt=0.0, lt=1.0)
    beta2: float = Field(0.999, gt=0.0, lt=1.0)
    epsilon: float = Field(1e-7, gt=0.0)
    shuffle_each_epoch: bool = True


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )


@dataclass
class EpochLog:
    epoch: int
    train_accuracy: float
    train_auc: float
    train_recall: float
    train_loss: float
    val_accuracy: float
    val_auc: float
    val_recall: float
    val_loss: float
    wall_time: float = 0.0

    def metric(self, split: str, name: str) -> float:
        return getattr(self, f"{split}_{name}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class FitResult:
    params: ModelParams
    state: AdamState
    logs: List[EpochLog]
    best_params: ModelParams
    best_epoch: int


# ── Loss ─────────────────────────────────────────────────────────────────

def categorical_cross_entropy(probs: np.ndarray,
                              onehot: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean clamped cross-entropy and its gradient wrt the pre-softmax logits.

    The gradient is the fused softmax + cross-entropy form ``(probs - onehot) / n``.
    """
    if probs.shape != onehot.shape or probs.ndim != 2:
        raise ShapeError(f"probs {list(probs.shape)} and one-hot {list(onehot.shape)} must match")
    valid = np.all((onehot == 0) | (onehot == 1), axis=1) & (onehot.sum(axis=1) == 1)
    if not valid.all():
        rows = np.flatnonzero(~valid).tolist()
        raise LabelError(f"one-hot rows {rows[:10]} are not valid one-hot vectors")

    labels = np.argmax(onehot, axis=1)
    loss = log_loss(EvalBatch(probs, labels))
    dlogits = (probs - onehot.astype(probs.dtype)) / probs.shape[0]
    return loss, dlogits


# ── Optimizer ────────────────────────────────────────────────────────────

def adam_step(params: ModelParams, grads: ModelParams, state: AdamState,
              cfg: TrainConfig) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; advances ``state.t`` by one."""
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ShapeError("parameter, gradient and optimizer-state names differ")

    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t

    updated: ModelParams = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient {list(g.shape)} vs parameter {list(p.shape)}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        updated[name] = (p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype)
    return updated, state


# ── Initialization ───────────────────────────────────────────────────────

def glorot_limit(shape: Tuple[int, ...]) -> float:
    """``sqrt(6 / (fan_in + fan_out))`` for dense ``[in,out]`` or conv ``[f,c,kh,kw]``."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec: ModelSpec, rng: Rng, dtype=np.float32) -> ModelParams:
    params: ModelParams = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            limit = glorot_limit(shape)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


# ── Epoch loop ───────────────────────────────────────────────────────────

def _show_progress() -> bool:
    return sys.stderr.isatty()


def train_epoch(params: ModelParams, state: AdamState, train_split: Sequence[Sample],
                cfg: TrainConfig, rng: Rng, spec: ModelSpec,
                metrics_cfg: Optional[MetricsConfig] = None,
                progress: bool = False) -> Tuple[ModelParams, AdamState, MetricsReport]:
    """One pass over ``train_split``; metrics use each batch's pre-update predictions."""
    if len(train_split) == 0:
        raise DataError("training split is empty")

    all_probs, all_labels = [], []
    n_batches = -(-len(train_split) // cfg.batch_size)
    stream = batches(train_split, cfg.batch_size, cfg.shuffle_each_epoch, rng,
                     num_classes=spec.num_classes)
    for x, onehot in tqdm(stream, total=n_batches, leave=False,
                          disable=not progress, desc="batches"):
        probs, caches = model_forward(params, x, spec)
        _, dlogits = categorical_cross_entropy(probs, onehot)
        grads = model_backward(params, caches, dlogits, spec, fused=True)
        params, state = adam_step(params, grads, state, cfg)
        all_probs.append(probs)
        all_labels.append(np.argmax(onehot, axis=1))

    report = evaluate(np.concatenate(all_probs), np.concatenate(all_labels), metrics_cfg)
    return params, state, report


def predict(params: ModelParams, samples: Sequence[Sample], spec: ModelSpec,
            batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Class probabilities and labels for ``samples`` in their given order."""
    probs, labels = [], []
    for x, onehot in batches(samples, batch_size, num_classes=spec.num_classes):
        p, _ = model_forward(params, x, spec)
        probs.append(p)
        labels.append(np.argmax(onehot, axis=1))
    return np.concatenate(probs), np.concatenate(labels)


def evaluate_split(params: ModelParams, samples: Sequence[Sample], spec: ModelSpec,
                   metrics_cfg: Optional[MetricsConfig] = None,
                   batch_size: int = 64) -> MetricsReport:
    if len(samples) == 0:
        raise DataError("cannot evaluate an empty split")
    probs, labels = predict(params, samples, spec, batch_size)
    return evaluate(probs, labels, metrics_cfg)


def _is_better(candidate: EpochLog, best: Optional[EpochLog]) -> bool:
    if best is None:
        return True
    if candidate.val_accuracy != best.val_accuracy:
        return candidate.val_accuracy > best.val_accuracy
    return candidate.val_loss < best.val_loss


def fit(spec: ModelSpec, splits: DatasetSplit, cfg: TrainConfig,
        metrics_cfg: Optional[MetricsConfig] = None,
        dtype=np.float32,
        on_epoch: Optional[Callable[[EpochLog], None]] = None,
        progress: Optional[bool] = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, validating after each one.

    The best parameters are those of the epoch with the highest validation
    accuracy (ties: lower validation loss, then the earlier epoch).
    """
    if not splits.train:
        raise DataError("training split is empty")
    if not splits.validation:
        raise DataError("validation split is empty")
    progress = _show_progress() if progress is None else progress

    params = init_params(spec, make_rng(cfg.seed, "init"), dtype=dtype)
    state = AdamState.fresh(params)
    shuffle_rng = make_rng(cfg.seed, "shuffle")

    logs: List[EpochLog] = []
    best: Optional[EpochLog] = None
    best_params = copy.deepcopy(params)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        params, state, train_report = train_epoch(
            params, state, splits.train, cfg, shuffle_rng, spec, metrics_cfg, progress)
        val_report = evaluate_split(params, splits.validation, spec, metrics_cfg)

        log = EpochLog(
            epoch=epoch,
            train_accuracy=train_report.accuracy,
            train_auc=train_report.auc,
            train_recall=train_report.recall,
            train_loss=train_report.loss,
            val_accuracy=val_report.accuracy,
            val_auc=val_report.auc,
            val_recall=val_report.recall,
            val_loss=val_report.loss,
            wall_time=time.perf_counter() - start,
        )
        logs.append(log)
        logger.info("epoch %d/%d  loss %.4f acc %.4f | val loss %.4f acc %.4f auc %.4f",
                    epoch, cfg.epochs, log.train_loss, log.train_accuracy,
                    log.val_loss, log.val_accuracy, log.val_auc)

        if _is_better(log, best):
            best = log
            best_params = copy.deepcopy(params)
        if on_epoch is not None:
            on_epoch(log)

    return FitResult(params=params, state=state, logs=logs,
                     best_params=best_params, best_epoch=best.epoch if best else 0)


# ── Gradient check ───────────────────────────────────────────────────────

def loss_of(params: ModelParams, x: np.ndarray, onehot: np.ndarray, spec: ModelSpec) -> float:
    probs, _ = model_forward(params, x, spec)
    loss, _ = categorical_cross_entropy(probs, onehot)
    return loss


def gradient_check(params: ModelParams, x: np.ndarray, onehot: np.ndarray, spec: ModelSpec,
                   eps: float = 1e-5, max_entries: Optional[int] = None,
                   rng: Optional[Rng] = None, dtype=np.float64,
                   floor: float = 1e-3) -> Dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    Analytic gradients are computed in ``dtype``; the central differences
    always run on a float64 copy. ``floor`` bounds the denominator so that
    gradients that are numerically zero do not blow the ratio up.
    ``max_entries`` samples that many entries per tensor (with ``rng``)
    instead of checking every one.
    """
    cast = {k: p.astype(dtype) for k, p in params.items()}
    probs, caches = model_forward(cast, np.asarray(x, dtype=dtype), spec)
    _, dlogits = categorical_cross_entropy(probs, onehot.astype(dtype))
    analytic = model_backward(cast, caches, dlogits, spec, fused=True)

    params64 = {k: p.astype(np.float64) for k, p in params.items()}
    x64 = np.asarray(x, dtype=np.float64)

    errors: Dict[str, float] = {}
    for name, p in params64.items():
        flat = p.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = (rng or make_rng(0, "init")).choice(flat.size, max_entries, replace=False)
        worst = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            plus = loss_of(params64, x64, onehot, spec)
            flat[i] = original - eps
            minus = loss_of(params64, x64, onehot, spec)
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic[name].reshape(-1)[i])
            denom = max(abs(a) + abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
        errors[name] = worst
    return errors
