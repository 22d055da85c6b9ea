"""Loss heads.  All entropies and log-likelihoods are in nats."""

from __future__ import annotations

import numpy as np

from pcmu.errors import ConfigError, DataError


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, targets) -> tuple:
    """Mean cross-entropy of a categorical head, natural log.

    logits: (batch, K) or (K,); targets: int class indices.  Returns
    (loss, gradient w.r.t. logits), gradient already averaged over the batch.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise DataError("non-finite logits")
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, k = logits.shape
    if k < 2:
        raise ConfigError("need at least 2 classes")
    if targets.min() < 0 or targets.max() >= k:
        raise DataError("target class out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), targets]))
    grad = softmax(logits)
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> tuple:
    """Mean squared error over all elements; gradient 2*(pred-target)/n."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise DataError(
            f"shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / diff.size


def sigmoid_bce(logits: np.ndarray, targets: np.ndarray) -> tuple:
    """Mean binary cross-entropy on per-element sigmoid outputs.

    Numerically stable form; targets in {0,1} (floats accepted).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise DataError(f"shape mismatch: {logits.shape} vs {targets.shape}")
    loss = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    probs = 1.0 / (1.0 + np.exp(-logits))
    return float(np.mean(loss)), (probs - targets) / logits.size
