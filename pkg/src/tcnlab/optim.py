"""Loss, parameter updates and the epoch training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, DataError, ShapeError, TrainingDiverged
from .models import ModelParams, ModelSpec, backward, forward

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def _check_labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("labels must be 0 or 1")
    return labels.astype(np.int64)


def cross_entropy_loss(logits, labels):
    """Mean two-class softmax cross-entropy and its gradient w.r.t. ``logits``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    B = logits.shape[0]
    labels = _check_labels(labels, B)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(B)
    loss = -float(log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= B
    return loss, grad


def _check_grads(params, grads):
    if set(params) != set(grads):
        raise ShapeError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ShapeError(f"{k}: gradient shape {grads[k].shape} != parameter shape {params[k].shape}")


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """In-place ``p <- p - lr * g``."""
    _check_grads(params, grads)
    for k, p in params.items():
        p -= lr * grads[k]


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    _check_grads(params, grads)
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    optimizer: str = "adam"
    lr: float = 0.005
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be non-negative")


def evaluate_loss_acc(params, spec, X, y, chunk=2048):
    """Eval-mode mean loss and accuracy (positive iff p1 >= p0)."""
    if len(X) == 0:
        return float("nan"), float("nan")
    total_loss = 0.0
    correct = 0
    for start in range(0, len(X), chunk):
        xb, yb = X[start : start + chunk], y[start : start + chunk]
        logits, _ = forward(params, spec, xb, mode=L.EVAL)
        loss, _ = cross_entropy_loss(logits, yb)
        total_loss += loss * len(xb)
        pred = (logits[:, 1] >= logits[:, 0]).astype(np.int64)
        correct += int((pred == yb).sum())
    return total_loss / len(X), correct / len(X)


@dataclass
class FitResult:
    params: ModelParams
    history: list


def fit(spec: ModelSpec, params: ModelParams, train, val, config: TrainConfig) -> FitResult:
    """Train ``params`` (updated in place) on ``train = (X, y)``.

    ``val`` may be ``None``. After every epoch both splits are scored in
    eval mode; the history has one dict per epoch. Raises TrainingDiverged
    if a batch loss is not finite.
    """
    X, y = train
    if len(X) == 0:
        raise DataError("training set is empty")
    y = _check_labels(y, len(X))
    if val is not None:
        Xv, yv = val
        yv = _check_labels(yv, len(Xv))
    else:
        Xv, yv = X[:0], y[:0]

    shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    adam = AdamState(lr=config.lr)
    history = []
    n = len(X)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            logits, cache = forward(params, spec, X[idx], mode=L.TRAIN, rng=dropout_rng)
            loss, grad = cross_entropy_loss(logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            grads = backward(params, spec, cache, grad)
            if config.optimizer == "adam":
                adam_step(params.weights, grads, adam)
            else:
                sgd_step(params.weights, grads, config.lr)
        tl, ta = evaluate_loss_acc(params, spec, X, y)
        vl, va = evaluate_loss_acc(params, spec, Xv, yv)
        history.append(dict(epoch=epoch, train_loss=tl, train_acc=ta, val_loss=vl, val_acc=va))
        log.info("epoch %d train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
                 epoch, tl, ta, vl, va)
    return FitResult(params, history)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in HISTORY_COLUMNS[1:]])
