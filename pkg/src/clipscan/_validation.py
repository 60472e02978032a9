"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np


class ShapeMismatchError(ValueError):
    """A clip tensor does not match the shape a model expects."""


def clip_array(x):
    """The tensor behind a clip object, or ``x`` itself if it is already array-like."""
    if isinstance(x, np.ndarray):
        return x
    return getattr(x, "data", x)


def check_clip_batch(X, expected_shape=None) -> np.ndarray:
    """Validate a ``(N, 3, T, S, S)`` clip batch, returning a contiguous array."""
    X = np.asarray(X)
    if X.ndim != 5 or X.shape[1] != 3:
        raise ShapeMismatchError(f"expected clips shaped (N, 3, T, S, S), got {X.shape}")
    if expected_shape is not None and tuple(X.shape[1:]) != tuple(expected_shape):
        raise ShapeMismatchError(f"clip shape {tuple(X.shape[1:])} does not match model input {tuple(expected_shape)}")
    if not np.issubdtype(X.dtype, np.floating):
        raise ShapeMismatchError(f"clips must be floating point, got {X.dtype}")
    return np.ascontiguousarray(X)


def check_probability(p, name="probability") -> float:
    if not isinstance(p, numbers.Real) or not 0.0 <= float(p) <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p!r}")
    return float(p)


def check_prob_matrix(P, n_classes=None, atol=1e-6) -> np.ndarray:
    """Validate rows of normalized class scores."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if n_classes is not None and P.shape[-1] != n_classes:
        raise ValueError(f"expected {n_classes} classes, got {P.shape[-1]}")
    if np.any(P < -atol) or np.any(P > 1 + atol) or not np.allclose(P.sum(axis=-1), 1.0, atol=atol):
        raise ValueError("score vectors must be normalized probabilities")
    return P


def check_positive_int(n, name) -> int:
    if not isinstance(n, numbers.Integral) or n < 1:
        raise ValueError(f"{name} must be a positive integer, got {n!r}")
    return int(n)
