"""Training loop, plateau learning-rate schedule and evaluation metrics."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd

from wenets import nawenet
from wenets import tensor_nn as nn
from wenets.corpus import (
    DEFAULT_BATCH_SIZE,
    METRIC_RANGES,
    ManifestEntry,
    SegmentLoader,
    batches,
)
from wenets.errors import ConfigError, ManifestError, NumericalError

EPOCH_LOG_COLUMNS = ["epoch", "train_rmse", "val_rmse", "val_rho", "lr", "seconds", "train_rho"]
COMBINED = "combined"

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    l2: float = 1e-5
    l2_scope: Literal["all", "weights"] = "all"
    epochs: int = 30
    batch_size: int = DEFAULT_BATCH_SIZE
    plateau_threshold: float = 1e-4
    plateau_patience: int = 5
    lr_decay_factor: float = 0.1
    reset_best_on_decay: bool = False
    seed: int = 0
    precision: Literal["f32", "f64"] = "f32"
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.l2 < 0 or self.plateau_threshold < 0:
            raise ConfigError("learning rate must be positive; l2 and plateau threshold non-negative")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}")
        if self.epochs < 1 or self.plateau_patience < 1 or self.batch_size < 2:
            raise ConfigError("epochs and patience must be at least 1, batch_size at least 2")
        if self.l2_scope not in ("all", "weights"):
            raise ConfigError(f"unknown l2_scope: {self.l2_scope}")

    @classmethod
    def from_settings(cls, section: dict, seed: int, precision: str, deterministic: bool) -> TrainConfig:
        return cls(seed=seed, precision=precision, deterministic=deterministic, **section)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class EpochLog:
    epoch: int
    train_rmse: float
    val_rmse: float
    val_rho: float
    lr: float
    seconds: float
    train_rho: float = math.nan

    def row(self, deterministic: bool = False) -> dict:
        return {
            "epoch": self.epoch,
            "train_rmse": self.train_rmse,
            "val_rmse": self.val_rmse,
            "val_rho": self.val_rho,
            "lr": self.lr,
            "seconds": 0.0 if deterministic else self.seconds,
            "train_rho": self.train_rho,
        }


def write_epoch_logs(path: Path | str, logs: Sequence[EpochLog], deterministic: bool = False) -> None:
    """EpochLog CSV; deterministic runs write 0 seconds so reruns are byte-identical."""
    frame = pd.DataFrame([log.row(deterministic) for log in logs], columns=EPOCH_LOG_COLUMNS)
    frame.to_csv(path, index=False)


# ---------------------------------------------------------------- LR schedule


@dataclass
class PlateauScheduler:
    initial_lr: float
    threshold: float = 1e-4
    patience: int = 5
    factor: float = 0.1
    reset_best_on_decay: bool = False
    best: float = math.inf
    counter: int = 0
    decays: int = 0

    @property
    def lr(self) -> float:
        """``initial * factor**decays`` in decimal, so 1e-4 decays to exactly 1e-5, 1e-6, ..."""
        exact = Decimal(repr(self.initial_lr)) * Decimal(repr(self.factor)) ** self.decays
        return float(exact)

    @classmethod
    def for_config(cls, config: TrainConfig) -> PlateauScheduler:
        return cls(
            config.learning_rate,
            config.plateau_threshold,
            config.plateau_patience,
            config.lr_decay_factor,
            config.reset_best_on_decay,
        )


def lr_schedule_step(state: PlateauScheduler, validation_loss: float) -> float:
    """Feed one epoch's validation loss; return the learning rate for the next epoch.

    Only a loss strictly below ``best - threshold`` counts as improvement.
    """
    if validation_loss < state.best - state.threshold:
        state.best = validation_loss
        state.counter = 0
        return state.lr

    state.counter += 1
    if state.counter >= state.patience:
        state.decays += 1
        state.counter = 0
        if state.reset_best_on_decay:
            state.best = math.inf
        logger.info("Validation loss plateaued; learning rate now %.3g.", state.lr)
    return state.lr


# ---------------------------------------------------------------- metrics


def pearson(a, b) -> float:
    """Sample Pearson correlation; centered sums are reduced pairwise by numpy."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pearson needs two equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("pearson needs at least two pairs")
    da = a - np.sum(a) / a.size
    db = b - np.sum(b) / b.size
    saa = np.sum(da * da)
    sbb = np.sum(db * db)
    if saa == 0.0 or sbb == 0.0:
        raise NumericalError("pearson undefined: zero variance in an input")
    rho = np.sum(da * db) / math.sqrt(saa * sbb)
    return float(min(1.0, max(-1.0, rho)))


def rmse(a, b) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.size < 1:
        raise ValueError("rmse needs at least one pair")
    return math.sqrt(np.sum(diff * diff) / diff.size)


def _safe_pearson(a, b, what: str) -> float:
    try:
        return pearson(a, b)
    except NumericalError:
        logger.warning("Correlation undefined for %s (constant predictions or targets).", what)
        return math.nan


# ---------------------------------------------------------------- prediction


def predict_mapped(
    model: nawenet.Model,
    entries: Sequence[ManifestEntry],
    ids: Sequence[int],
    batch_size: int = DEFAULT_BATCH_SIZE,
    loader: SegmentLoader | None = None,
    with_targets: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode predictions (mapped space) over `ids`, in order, with mapped targets."""
    metric = model.target_metric if with_targets else None
    predictions = []
    targets = []
    for batch in batches(
        entries,
        batch_size,
        ids=ids,
        metric=metric,
        mapper=model.mapper,
        input_length=model.config.input_length,
        shuffle=False,
        loader=loader,
    ):
        output, _ = nawenet.forward(model, batch.inputs, "eval")
        predictions.append(output.astype(np.float64))
        if batch.targets is not None:
            targets.append(batch.targets)
    return np.concatenate(predictions), (np.concatenate(targets) if targets else None)


def predict_samples(model: nawenet.Model, windows: np.ndarray, batch_size: int = DEFAULT_BATCH_SIZE) -> np.ndarray:
    """Native-unit scores for ``[N, >=input_length]`` sample windows."""
    windows = np.asarray(windows)[:, : model.config.input_length]
    outputs = [
        nawenet.forward(model, windows[start : start + batch_size, None, :], "eval")[0]
        for start in range(0, len(windows), batch_size)
    ]
    return model.mapper.unmap(np.concatenate(outputs))


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: nawenet.Model
    logs: list[EpochLog]
    optimizer_steps: int


def _decay_filter(scope: str):
    if scope == "weights":
        return lambda name: name.endswith(".weights")
    return None


def train(
    model: nawenet.Model,
    entries: Sequence[ManifestEntry],
    train_ids: Sequence[int],
    val_ids: Sequence[int],
    config: TrainConfig,
) -> TrainResult:
    """Adam on MSE in mapped target space; validation each epoch drives the plateau schedule."""
    if not train_ids:
        raise ManifestError("empty training split")
    if not val_ids:
        raise ManifestError("empty validation split")
    metric = model.target_metric
    for entry_id in [*train_ids, *val_ids]:
        entries[entry_id].target(metric)

    loader = SegmentLoader()
    params = model.parameters()
    state = nn.AdamState()
    scheduler = PlateauScheduler.for_config(config)
    decay = _decay_filter(config.l2_scope)
    dropout_rng = np.random.default_rng([config.seed, 1])
    logs: list[EpochLog] = []
    steps = 0

    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = scheduler.lr
        epoch_predictions = []
        epoch_targets = []
        for batch_number, batch in enumerate(
            batches(
                entries,
                config.batch_size,
                config.seed,
                epoch,
                ids=train_ids,
                metric=metric,
                mapper=model.mapper,
                input_length=model.config.input_length,
                training=True,
                loader=loader,
            )
        ):
            predictions, cache = nawenet.forward(model, batch.inputs, "train", dropout_rng)
            residual = predictions.astype(np.float64) - batch.targets
            loss = float(np.mean(residual * residual))
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss in epoch {epoch} batch {batch_number} (entries {batch.entry_ids[:5]}...)"
                )
            grads = nawenet.backward(model, cache, 2.0 * residual / residual.size)
            nn.adam_step(params, grads, state, lr, config.l2, decay)
            steps += 1
            epoch_predictions.append(predictions.astype(np.float64))
            epoch_targets.append(batch.targets)

        if not epoch_predictions:
            raise ManifestError("training split yields no batch of two or more segments")
        train_predictions = np.concatenate(epoch_predictions)
        train_targets = np.concatenate(epoch_targets)
        val_predictions, val_targets = predict_mapped(model, entries, val_ids, config.batch_size, loader)
        val_rmse = rmse(val_predictions, val_targets)
        if not math.isfinite(val_rmse):
            raise NumericalError(f"non-finite validation loss in epoch {epoch}")

        log = EpochLog(
            epoch=epoch,
            train_rmse=rmse(train_predictions, train_targets),
            val_rmse=val_rmse,
            val_rho=_safe_pearson(val_predictions, val_targets, f"validation, epoch {epoch}"),
            lr=lr,
            seconds=time.perf_counter() - started,
            train_rho=_safe_pearson(train_predictions, train_targets, f"training, epoch {epoch}"),
        )
        logs.append(log)
        logger.info(
            "Epoch %d: train %.4f, val %.4f, rho %.4f, lr %.3g (%.1fs).",
            epoch,
            log.train_rmse,
            log.val_rmse,
            log.val_rho,
            lr,
            log.seconds,
        )
        lr_schedule_step(scheduler, val_rmse)

    return TrainResult(model, logs, steps)


# ---------------------------------------------------------------- evaluation


@dataclass
class DatasetMetrics:
    dataset: str
    count: int
    rho: float
    rmse: float


@dataclass
class EvalReport:
    metric: str
    rows: list[DatasetMetrics]
    entry_ids: list[int] = field(default_factory=list)
    datasets: list[str] = field(default_factory=list)
    predictions: np.ndarray = field(default_factory=lambda: np.zeros(0))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def combined(self) -> DatasetMetrics:
        return self.for_dataset(COMBINED)

    def for_dataset(self, dataset: str) -> DatasetMetrics:
        for row in self.rows:
            if row.dataset == dataset:
                return row
        raise KeyError(dataset)

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"dataset": r.dataset, "count": r.count, "rho": r.rho, "rmse": r.rmse} for r in self.rows],
            columns=["dataset", "count", "rho", "rmse"],
        )

    def pairs_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "entry_id": self.entry_ids,
                "dataset": self.datasets,
                "prediction": self.predictions,
                "target": self.targets,
            }
        )

    def histogram(self, bins: int = 20) -> pd.DataFrame:
        """2-D counts of (clamped prediction, target) over the metric's native range."""
        low, high = METRIC_RANGES[self.metric]
        clamped = np.clip(self.predictions, low, high)
        counts, _, _ = np.histogram2d(clamped, self.targets, bins=bins, range=[[low, high], [low, high]])
        pred_bin, target_bin = np.nonzero(counts >= 0)
        return pd.DataFrame(
            {
                "pred_bin": pred_bin,
                "target_bin": target_bin,
                "count": counts[pred_bin, target_bin].astype(int),
            }
        )


def _metrics(dataset: str, predictions: np.ndarray, targets: np.ndarray) -> DatasetMetrics:
    rho = _safe_pearson(predictions, targets, dataset) if len(predictions) >= 2 else math.nan
    return DatasetMetrics(dataset, len(predictions), rho, rmse(predictions, targets))


def evaluate(
    model: nawenet.Model,
    entries: Sequence[ManifestEntry],
    ids: Sequence[int] | None = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> EvalReport:
    """Native-unit correlation and RMSE per source dataset and over the pooled pairs."""
    ids = list(range(len(entries))) if ids is None else list(ids)
    if not ids:
        raise ManifestError("no segments to evaluate")
    for entry_id in ids:
        entries[entry_id].target(model.target_metric)

    mapped, _ = predict_mapped(model, entries, ids, batch_size)
    predictions = model.mapper.unmap(mapped)
    targets = np.array([entries[entry_id].target(model.target_metric) for entry_id in ids], dtype=np.float64)
    datasets = [entries[entry_id].source_dataset for entry_id in ids]

    rows = []
    labels = np.array(datasets)
    for dataset in sorted(set(datasets)):
        selected = labels == dataset
        rows.append(_metrics(dataset, predictions[selected], targets[selected]))
    rows.append(_metrics(COMBINED, predictions, targets))
    return EvalReport(model.target_metric, rows, ids, datasets, predictions, targets)


def write_report(report: EvalReport, out_dir: Path | str, bins: int = 20) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {
        out_dir / "metrics.csv": report.metrics_frame(),
        out_dir / "pairs.csv": report.pairs_frame(),
        out_dir / "histogram.csv": report.histogram(bins),
    }
    for path, frame in written.items():
        frame.to_csv(path, index=False)
    return list(written)
