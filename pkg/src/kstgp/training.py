"""Squared-error training loop with per-epoch kernel refits."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from kstgp.errors import EmptySet, InvalidConfig, TrainingDiverged
from kstgp.gp import DEFAULT_FIT_BUDGET
from kstgp.network import Network, apply_update, backward, forward

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
DIVERGENCE_PATIENCE = 3
DEFAULT_BATCH_SIZE = 32


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    eta_inner: float = 1e-1
    eta_outer: float = 1e-3
    batch_size: int | None = DEFAULT_BATCH_SIZE  # None means full batch
    seed: int = 0
    hyperfit_budget: int = DEFAULT_FIT_BUDGET
    reduction: str = "mean"  # batch loss is the mean or the sum of per-instance losses

    def __post_init__(self):
        if self.reduction not in ("mean", "sum"):
            raise InvalidConfig(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.eta_inner < 0 or self.eta_outer < 0:
            raise InvalidConfig("learning rates must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidConfig(f"batch size must be >= 1, got {self.batch_size}")
        if self.hyperfit_budget < 0:
            raise InvalidConfig("hyperfit budget must be >= 0")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    wall_ms: float


def loss(y_hat, target):
    return (np.asarray(y_hat) - np.asarray(target)) ** 2


def loss_grad(y_hat, target):
    return 2.0 * (np.asarray(y_hat) - np.asarray(target))


def classify(y_hat):
    """Nearest class code in {0, 1}; 0.5 goes to 1."""
    out = (np.asarray(y_hat) >= 0.5).astype(int)
    return int(out) if out.ndim == 0 else out


def evaluate(net: Network, features, labels) -> tuple[float, float]:
    """Return (accuracy, mean squared-error loss) over a labelled set."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptySet("cannot evaluate on an empty set")
    y_hat = forward(net, np.asarray(features, dtype=float).reshape(-1, net.dims)).output
    return float(np.mean(classify(y_hat) == labels)), float(np.mean(loss(y_hat, labels)))


def train(net: Network, data, cfg: TrainConfig, callback=None):
    """Train ``net`` in place on ``data.train``; returns ``(net, history)``.

    Each epoch refits every kernel, then takes one gradient step per batch
    on the mean squared error, then scores both splits.
    """
    x_tr, y_tr = data.train.features, data.train.labels
    x_va, y_va = data.validation.features, data.validation.labels
    if x_tr.shape[1] != net.dims:
        raise InvalidConfig(f"dataset has {x_tr.shape[1]} features, network expects {net.dims}")
    rng = np.random.default_rng(cfg.seed)
    history = []
    bad_epochs = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        net.refit(cfg.hyperfit_budget)
        if cfg.batch_size is None or cfg.batch_size >= len(y_tr):
            batches = [np.arange(len(y_tr))]
        else:
            order = rng.permutation(len(y_tr))
            batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for idx in batches:
            trace = forward(net, x_tr[idx])
            g = loss_grad(trace.output, y_tr[idx])
            if cfg.reduction == "mean":
                g = g / len(idx)
            apply_update(net, backward(net, trace, g), cfg.eta_inner, cfg.eta_outer)
        train_acc, train_loss = evaluate(net, x_tr, y_tr)
        if len(y_va):
            val_acc, val_loss = evaluate(net, x_va, y_va)
        else:
            val_acc, val_loss = float("nan"), float("nan")
        wall_ms = max((time.perf_counter() - t0) * 1e3, 1e-6)
        m = EpochMetrics(epoch, train_loss, val_loss, train_acc, val_acc, wall_ms)
        history.append(m)
        logger.info(
            "epoch %d train_loss=%.6g val_loss=%.6g train_acc=%.4f val_acc=%.4f",
            epoch, train_loss, val_loss, train_acc, val_acc,
        )
        if callback is not None:
            callback(m)
        if not np.isfinite(train_loss) or train_loss > DIVERGENCE_LOSS:
            bad_epochs += 1
            if bad_epochs >= DIVERGENCE_PATIENCE:
                raise TrainingDiverged(f"train loss {train_loss} at epoch {epoch}")
        else:
            bad_epochs = 0
    return net, history


METRIC_FIELDS = [f.name for f in fields(EpochMetrics)]


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for m in history:
            w.writerow(asdict(m))
