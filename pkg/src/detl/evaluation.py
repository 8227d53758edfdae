"""Confusion matrices, stratified k-fold cross-validation and accuracy reporting."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .data import LabeledDataset, stratified_folds
from .models import ModelError, ModelGraph
from .transfer import TARGET_TASK, TrainConfig, TrainRunReport, adapt, finetune, finetune_config, predict_logits

log = logging.getLogger(__name__)

REFERENCE_ACCURACY = {"mini-alex": (82.98, 0.02), "mini-vgg": (90.13, 0.14), "mini-res": (85.98, 0.07)}
REFERENCE_NAMES = {"mini-alex": "AlexNet", "mini-vgg": "VGGNet", "mini-res": "ResNet"}


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        c = len(self.class_names)
        if self.counts.shape != (c, c):
            raise ValueError(f"counts must be {c}x{c}")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_names: Sequence[str]) -> "ConfusionMatrix":
        c = len(class_names)
        counts = np.zeros((c, c), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts, tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def recall(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise ValueError("cannot add matrices over different class lists")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("true\\pred," + ",".join(self.class_names) + "\n")
        for name, row in zip(self.class_names, self.counts):
            buf.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
        return buf.getvalue()


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(logits, axis=1)


def evaluate(model: ModelGraph, samples: LabeledDataset, batch_size: int = 128) -> ConfusionMatrix:
    """Plain forward passes (no augmentation); prediction is the arg-max logit."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty sample list")
    if model.num_classes != len(samples.class_names):
        raise ModelError(f"model predicts {model.num_classes} classes, dataset has {len(samples.class_names)}")
    pred = argmax_lowest(predict_logits(model, samples.images(), batch_size))
    return ConfusionMatrix.from_predictions(samples.labels(), pred, samples.class_names)


@dataclass
class CvResult:
    architecture: str
    fold_matrices: list[ConfusionMatrix]
    fold_reports: list[TrainRunReport] = field(default_factory=list, repr=False)

    @property
    def fold_accuracies(self) -> np.ndarray:
        return np.array([m.accuracy for m in self.fold_matrices])

    @property
    def summed(self) -> ConfusionMatrix:
        total = self.fold_matrices[0]
        for m in self.fold_matrices[1:]:
            total = total + m
        return total

    @property
    def mean(self) -> float:
        return float(self.fold_accuracies.mean())

    @property
    def std(self) -> float:
        """Population standard deviation over folds."""
        return float(self.fold_accuracies.std(ddof=0))


def run_cv(architecture: str, checkpoint: ModelGraph, data_b: LabeledDataset, k: int = 5, seed: int = 0,
           config: Optional[TrainConfig] = None,
           on_fold: Optional[Callable[[int, ConfusionMatrix, ModelGraph], None]] = None) -> CvResult:
    """Every fold restarts from ``checkpoint``: adapt, fine-tune on the other folds, test on this one.

    ``on_fold(fold, matrix, model)`` sees each fold's fine-tuned model before it is discarded.
    """
    if checkpoint.preset != "custom" and checkpoint.preset != architecture:
        raise ModelError(f"checkpoint holds {checkpoint.preset}, not {architecture}")
    config = config or finetune_config()
    plan = stratified_folds(data_b, k, seed)
    matrices, reports = [], []
    for fold in range(k):
        fold_seed = seed * 1000 + fold
        train_set = data_b.subset(plan.train_indices(fold))
        test_set = data_b.subset(plan.test_indices(fold))
        try:
            model = adapt(checkpoint, TARGET_TASK, seed=fold_seed)
            model, report = finetune(model, train_set, replace(config, seed=fold_seed), validation=test_set)
            cm = evaluate(model, test_set, config.eval_batch_size)
        except Exception as exc:
            raise RuntimeError(f"cross-validation fold {fold + 1} failed: {exc}") from exc
        log.info("fold %d/%d accuracy %.4f", fold + 1, k, cm.accuracy)
        matrices.append(cm)
        reports.append(report)
        if on_fold is not None:
            on_fold(fold, cm, model)
    return CvResult(architecture, matrices, reports)


def format_accuracy(mean: float, std: float) -> str:
    """Percent with two decimals, e.g. ``90.13% ± 0.14``."""
    return f"{100 * mean:.2f}% ± {100 * std:.2f}"


def summarize(result: CvResult) -> tuple[str, str]:
    """Human-readable text and the ``fold,accuracy`` CSV for a CV run."""
    summed = result.summed
    lines = [f"architecture: {result.architecture}", f"folds: {len(result.fold_matrices)}"]
    for i, acc in enumerate(result.fold_accuracies, start=1):
        lines.append(f"  fold {i}: {100 * acc:.2f}%")
    lines.append(f"accuracy (mean ± population std over folds): {format_accuracy(result.mean, result.std)}")
    lines.append(f"accuracy of summed matrix: {100 * summed.accuracy:.2f}%")
    if result.architecture in REFERENCE_ACCURACY:
        m, s = REFERENCE_ACCURACY[result.architecture]
        lines.append(f"reference ({REFERENCE_NAMES[result.architecture]}, clinical data): {m:.2f}% ± {s:.2f}")
    lines.append("per-class recall:")
    for name, r in zip(summed.class_names, summed.recall()):
        lines.append(f"  {name}: {100 * r:.2f}%")
    lines.append("summed confusion matrix (rows true, columns predicted):")
    lines.extend("  " + row for row in summed.to_csv().strip().splitlines())

    buf = io.StringIO()
    buf.write("fold,accuracy\n")
    for i, acc in enumerate(result.fold_accuracies, start=1):
        buf.write(f"{i},{acc:.6f}\n")
    buf.write(f"summary,{result.mean:.6f},{result.std:.6f}\n")
    return "\n".join(lines) + "\n", buf.getvalue()
