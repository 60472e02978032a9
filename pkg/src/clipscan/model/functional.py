"""Score normalization and the classification loss."""

from __future__ import annotations

import numpy as np


def softmax(raw) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    x = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax needs finite scores")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(raw) -> np.ndarray:
    x = np.asarray(raw, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(label: int, n_classes: int = 2) -> np.ndarray:
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    y = np.zeros(n_classes)
    y[label] = 1.0
    return y


def check_one_hot(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim < 1 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
        raise ValueError("label must be one-hot: exactly one component equal to 1")
    return y


def ce_loss(raw, y) -> float | np.ndarray:
    """Cross entropy ``-sum_k y_k log softmax_k(raw)``; batched inputs give per-sample losses."""
    y = check_one_hot(y)
    loss = -(y * log_softmax(raw)).sum(axis=-1)
    return float(loss) if np.ndim(loss) == 0 else loss
