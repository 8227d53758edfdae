"""Source pretraining, head swap + freezing, and target fine-tuning."""
from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import optim
from .data import (SOURCE_CLASSES, TARGET_CLASSES, AugmentationPolicy, LabeledDataset, augment_batch,
                   balanced_holdout)
from .models import ModelError, ModelGraph, replace_head, set_trainable_from_block
from .ops import softmax_cross_entropy
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """A label space over chest films; source and target share the image feature space."""

    role: str
    labels: tuple[str, ...]
    domain: str = ""


SOURCE_TASK = TaskSpec("source", SOURCE_CLASSES, "chest films, normal vs any pathology")
TARGET_TASK = TaskSpec("target", TARGET_CLASSES,
                       "chest films extended with pneumonia and covid19 cases; same image space as the source")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    cosine: bool = True
    lr_min: float = 0.0
    augment: bool = True
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    holdout_per_class: int = 80
    select_best: bool = True
    eval_batch_size: int = 128


def pretrain_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def finetune_config(**overrides) -> TrainConfig:
    base = TrainConfig(epochs=50, optimizer="sgd-momentum", lr=1e-4, momentum=0.9, cosine=False,
                       augment=True, select_best=False)
    return replace(base, **overrides)


@dataclass
class TrainRunReport:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,lr,train_loss,train_acc,val_acc\n")
        for e in range(self.epochs):
            buf.write(f"{e + 1},{self.lr[e]:.10g},{self.train_loss[e]:.8f},{self.train_acc[e]:.6f},"
                      f"{self.val_acc[e]:.6f}\n")
        return buf.getvalue()


def predict_logits(model: ModelGraph, images: np.ndarray, batch_size: int = 128, start: int = 0) -> np.ndarray:
    """Logits for ``images`` (or cached activations entering layer ``start``), without taping."""
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model.forward(images[i:i + batch_size], start=start).data)
    if not outs:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(outs)


def frozen_features(model: ModelGraph, images: np.ndarray, stop: int, batch_size: int = 128) -> np.ndarray:
    with no_grad():
        return np.concatenate([model.forward(images[i:i + batch_size], stop=stop).data
                               for i in range(0, len(images), batch_size)])


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else float("nan")


def _snapshot(model: ModelGraph) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t, _ in model.named_parameters()}


def _restore(model: ModelGraph, snap: dict[str, np.ndarray]) -> None:
    for name, t, _ in model.named_parameters():
        t.data[...] = snap[name]


def train(model: ModelGraph, train_set: LabeledDataset, config: TrainConfig,
          validation: Optional[LabeledDataset] = None) -> tuple[ModelGraph, TrainRunReport]:
    """Minibatch training of a copy of ``model``; the input model is not modified.

    With augmentation off, the frozen leading layers are evaluated once and
    their outputs cached, since they cannot change during the run.
    """
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    if model.parameter_count(trainable_only=True) == 0:
        raise TrainingError("model has no trainable parameters")
    model = model.copy()
    t0 = time.perf_counter()
    schedule = optim.CosineSchedule(config.lr, config.epochs, config.lr_min) if config.cosine else None
    state = optim.OptimState(config.optimizer, config.lr, config.momentum, config.betas, config.eps, schedule)

    x_train, y_train = train_set.images(), train_set.labels()
    x_val = validation.images() if validation is not None and len(validation) else None
    y_val = validation.labels() if x_val is not None else None
    start = 0
    if not config.augment and model.frozen_prefix_end() > 0:
        start = model.frozen_prefix_end()
        x_train = frozen_features(model, x_train, start, config.eval_batch_size)
        if x_val is not None:
            x_val = frozen_features(model, x_val, start, config.eval_batch_size)

    shuffle_rng = np.random.default_rng((config.seed, 0))
    report = TrainRunReport()
    best_acc, best_snap = -np.inf, None
    n = len(x_train)
    for epoch in range(config.epochs):
        state.set_epoch(epoch)
        aug_rng = np.random.default_rng((config.policy.seed, config.seed, 1, epoch))
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            xb = x_train[idx]
            if config.augment:
                xb = augment_batch(xb, config.policy, aug_rng)
            try:
                logits = model.forward(Tensor(xb), start=start)
                loss, _ = softmax_cross_entropy(logits, y_train[idx])
            except NonFiniteError as exc:
                raise TrainingError(f"training diverged at epoch {epoch + 1}, batch {b0 // config.batch_size}: {exc}") from exc
            model.zero_grad()
            loss.backward()
            optim.step(state, model)
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y_train[idx]))
        report.lr.append(state.lr)
        report.train_loss.append(loss_sum / n)
        report.train_acc.append(correct / n)
        if x_val is not None:
            val_acc = _accuracy(predict_logits(model, x_val, config.eval_batch_size, start), y_val)
        else:
            val_acc = float("nan")
        report.val_acc.append(val_acc)
        log.info("epoch %d/%d lr=%.3g loss=%.4f train_acc=%.4f val_acc=%.4f", epoch + 1, config.epochs,
                 state.lr, report.train_loss[-1], report.train_acc[-1], val_acc)
        if config.select_best and x_val is not None:
            if val_acc > best_acc:
                best_acc, best_snap, report.best_epoch = val_acc, _snapshot(model), epoch
        else:
            report.best_epoch = epoch
    if best_snap is not None:
        _restore(model, best_snap)
    report.wall_time = time.perf_counter() - t0
    return model, report


def pretrain(model: ModelGraph, data_a: LabeledDataset, config: TrainConfig) -> tuple[ModelGraph, TrainRunReport]:
    """Train from scratch on the binary source task and keep the best-validation weights."""
    if model.num_classes != 2:
        raise ModelError("pretraining expects a 2-class model")
    if len(data_a) == 0:
        raise TrainingError("source dataset is empty")
    train_set, val_set = balanced_holdout(data_a, config.holdout_per_class, config.seed)
    best, report = train(model, train_set, replace(config, select_best=True), validation=val_set)
    best.class_names = tuple(data_a.class_names)
    return best, report


def adapt(checkpoint: ModelGraph, target: TaskSpec = TARGET_TASK, seed: int = 0) -> ModelGraph:
    """New head for the target label space; freeze everything below the last conv block."""
    model = replace_head(checkpoint, len(target.labels), seed=seed, class_names=target.labels)
    return set_trainable_from_block(model, model.last_conv_block())


def finetune(model: ModelGraph, data_b: LabeledDataset, config: TrainConfig,
             validation: Optional[LabeledDataset] = None) -> tuple[ModelGraph, TrainRunReport]:
    """SGD-momentum on the trainable layers only; frozen weights are left bit-identical."""
    if model.frozen_prefix_end() == 0 and all(layer.trainable for layer in model.layers):
        log.warning("fine-tuning a model with no frozen layers")
    return train(model, data_b, config, validation)
