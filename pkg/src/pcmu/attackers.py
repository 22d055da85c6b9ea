"""Adversaries that quantify residual leakage of a masking policy.

Both consume only the grid-load sequence: a regressor inferring the true
demand sequence (scored by error normalised against the predict-the-mean
baseline, so 1.0 means no information) and a per-step occupancy classifier
(scored by balanced accuracy, chance level 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcmu.config import AttackerSection
from pcmu.errors import DataError
from pcmu.nn import DenseStack, RmsProp, mse_loss, sigmoid_bce


@dataclass
class AttackerModel:
    net: DenseStack
    z_scale: float
    y_scale: float


@dataclass
class AttackMetrics:
    normalized_error: float | None = None
    balanced_accuracy: float | None = None


def nmse(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Sum squared error over sum squared deviation from the target mean."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    denom = np.sum((targets - targets.mean()) ** 2)
    if denom == 0:
        raise DataError("targets have zero variance")
    return float(np.sum((predictions - targets) ** 2) / denom)


def balanced_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """(TPR + TNR) / 2 over all prediction/label pairs."""
    predictions = np.asarray(predictions).astype(bool).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if not labels.any():
        raise DataError("test split has no positive (occupied) examples")
    if labels.all():
        raise DataError("test split has no negative (vacant) examples")
    tpr = np.mean(predictions[labels])
    tnr = np.mean(~predictions[~labels])
    return float((tpr + tnr) / 2.0)


def _epoch_batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train_regression(net, optimizer, x, targets, x_val, val_targets,
                      cfg: AttackerSection, rng, loss_kind: str):
    """Minibatch training with early stopping on the validation loss."""
    best_val = np.inf
    best_params = [a.copy() for a in net.arrays()]
    stale = 0
    loss_fn = mse_loss if loss_kind == "mse" else sigmoid_bce
    for _epoch in range(cfg.epochs):
        for idx in _epoch_batches(len(x), cfg.batch_size, rng):
            out, cache = net.forward(x[idx])
            _loss, grad = loss_fn(out, targets[idx])
            grads, _ = net.backward(cache, grad)
            optimizer.apply(net.arrays(), grads)
        val_out, _ = net.forward(x_val)
        val_loss, _ = loss_fn(val_out, val_targets)
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_params = [a.copy() for a in net.arrays()]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.set_arrays(best_params)


def train_load_attacker(train_z, train_y, val_z, val_y,
                        cfg: AttackerSection, rng) -> AttackerModel:
    """Fit the demand regressor on (z -> y) episode pairs."""
    train_z = np.asarray(train_z, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    if len(train_z) == 0:
        raise DataError("no training episodes for the load attacker")
    horizon = train_z.shape[1]
    z_scale = max(float(np.abs(train_z).max()), 1e-9)
    y_scale = max(float(np.abs(train_y).max()), 1e-9)
    widths = [horizon, *cfg.load_hidden, horizon]
    net = DenseStack.create(widths, ["relu"] * len(cfg.load_hidden) + ["linear"],
                            rng)
    optimizer = RmsProp(cfg.learning_rate)
    _train_regression(net, optimizer, train_z / z_scale, train_y / y_scale,
                      np.asarray(val_z) / z_scale, np.asarray(val_y) / y_scale,
                      cfg, rng, "mse")
    return AttackerModel(net=net, z_scale=z_scale, y_scale=y_scale)


def eval_load_attacker(model: AttackerModel, test_z, test_y) -> float:
    test_z = np.asarray(test_z, dtype=np.float64)
    test_y = np.asarray(test_y, dtype=np.float64)
    pred, _ = model.net.forward(test_z / model.z_scale)
    return nmse(pred * model.y_scale, test_y)


def train_occupancy_attacker(train_z, train_occ, val_z, val_occ,
                             cfg: AttackerSection, rng) -> AttackerModel:
    """Fit the per-step occupancy classifier on (z -> occupancy) pairs."""
    train_z = np.asarray(train_z, dtype=np.float64)
    train_occ = np.asarray(train_occ, dtype=np.float64)
    if len(train_z) == 0:
        raise DataError("no training episodes for the occupancy attacker")
    horizon = train_z.shape[1]
    z_scale = max(float(np.abs(train_z).max()), 1e-9)
    widths = [horizon, *cfg.occupancy_hidden, horizon]
    net = DenseStack.create(
        widths, ["relu"] * len(cfg.occupancy_hidden) + ["linear"], rng)
    optimizer = RmsProp(cfg.learning_rate)
    _train_regression(net, optimizer, train_z / z_scale, train_occ,
                      np.asarray(val_z) / z_scale,
                      np.asarray(val_occ, dtype=np.float64), cfg, rng, "bce")
    return AttackerModel(net=net, z_scale=z_scale, y_scale=1.0)


def eval_occupancy_attacker(model: AttackerModel, test_z, test_occ,
                            threshold: float = 0.5) -> float:
    test_z = np.asarray(test_z, dtype=np.float64)
    logits, _ = model.net.forward(test_z / model.z_scale)
    probs = 1.0 / (1.0 + np.exp(-logits))
    return balanced_accuracy(probs >= threshold, test_occ)
