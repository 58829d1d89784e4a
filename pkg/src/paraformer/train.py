"""Mini-batch training and accuracy evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigError, Tensor, backward, cross_entropy, no_grad
from .blocks import predict
from .data import Dataset, Splits
from .models import Model, logits_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params, self.lr, self.momentum, self.wd = params, lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.wd * p.data if self.wd else p.grad
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g


class Adam:
    """Adam with decoupled weight decay (AdamW when ``weight_decay > 0``)."""

    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params, self.lr = params, lr
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data -= (self.lr * update).astype(p.dtype, copy=False)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float | None]
    correct: int
    total: int
    class_counts: list[int]

    def to_text(self, class_names=None) -> str:
        lines = [f"accuracy {self.accuracy:.2f}% ({self.correct}/{self.total})"]
        for k, acc in enumerate(self.per_class):
            name = class_names[k] if class_names else str(k)
            shown = "undefined" if acc is None else f"{acc:.2f}%"
            lines.append(f"  {k:>3} {name:<14} {shown:>10}  n={self.class_counts[k]}")
        return "\n".join(lines) + "\n"


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray, classes: int) -> EvalResult:
    """``100 * correct / total`` overall and per class; argmax ties pick the lowest index.

    Classes with no samples get ``None`` rather than 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty index list")
    hits = predict(np.asarray(logits)) == labels
    per_class, counts = [], []
    for k in range(classes):
        mask = labels == k
        counts.append(int(mask.sum()))
        per_class.append(100.0 * float(hits[mask].sum()) / counts[-1] if counts[-1] else None)
    correct = int(hits.sum())
    return EvalResult(100.0 * correct / labels.size, per_class, correct, int(labels.size), counts)


def predict_logits(model: Model, dataset: Dataset, indices, batch_size: int = 256) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = []
    with no_grad():
        for i in range(0, len(indices), batch_size):
            x = dataset.batch(indices[i:i + batch_size], model.spec.dtype)
            out.append(logits_tensor(model, x).data)
    return np.concatenate(out) if out else np.zeros((0, model.spec.classes))


def evaluate(model: Model, dataset: Dataset, indices, batch_size: int = 256) -> EvalResult:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot evaluate an empty index list")
    logits = predict_logits(model, dataset, indices, batch_size)
    return accuracy_from_logits(logits, dataset.labels[indices], model.spec.classes)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -math.inf
    best_state: dict[str, np.ndarray] | None = None

    def best_model(self) -> Model:
        """The trained model with the best-validation parameters restored."""
        if self.best_state is not None:
            self.model.load_state(self.best_state)
        return self.model


def write_history(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_acc"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_acc)])


def train(model: Model, dataset: Dataset, splits: Splits, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Adam/SGD on mean cross-entropy; validation accuracy after each epoch.

    The batch order of every epoch comes from ``cfg.seed``, so identical
    inputs give bitwise-identical parameters.
    """
    if dataset.images.shape[1:] != model.spec.image:
        raise ConfigError(f"dataset images {dataset.images.shape[1:]} do not match model input {model.spec.image}")
    if dataset.num_classes != model.spec.classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model predicts {model.spec.classes}")
    params = model.parameters()
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    train_idx = np.asarray(splits.train, dtype=np.int64)
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            for p in params:
                p.grad = None
            loss = cross_entropy(logits_tensor(model, dataset.batch(idx, model.spec.dtype)), dataset.labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            backward(loss, params)
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        val = evaluate(model, dataset, splits.val).accuracy if len(splits.val) else float("nan")
        rec = EpochRecord(epoch, total / max(seen, 1), val)
        result.history.append(rec)
        log.info("epoch %d loss %.4f val %.2f", epoch, rec.train_loss, rec.val_acc)
        if on_epoch is not None:
            on_epoch(rec)
        if val > result.best_val_acc:
            result.best_epoch, result.best_val_acc, result.best_state = epoch, val, model.state()
    return result


def fit_batch(model: Model, images: np.ndarray, labels, steps: int, cfg: TrainConfig) -> list[float]:
    """Repeated optimizer steps on one fixed batch; returns the loss before each step."""
    params = model.parameters()
    opt = make_optimizer(params, cfg)
    losses = []
    for _ in range(steps):
        for p in params:
            p.grad = None
        loss = cross_entropy(logits_tensor(model, images), labels)
        losses.append(float(loss.data))
        backward(loss, params)
        opt.step()
    return losses
