"""Probability primitives and a central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidInputError

DEFAULT_FD_STEP = 1e-5


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise InvalidInputError("logit vector needs at least two entries")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("logits must be finite")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("logits must be finite")
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def sigmoid(u):
    """Logistic function; scalar in, float out, arrays elementwise.

    Uses ``exp(-|u|)`` so that neither branch overflows.
    """
    a = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("sigmoid input must be finite")
    e = np.exp(-np.abs(a))
    out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def sigmoid_derivative(u):
    s = sigmoid(u)
    return s * (1.0 - s)


def softplus(u):
    """log(1 + e^u), stable for large |u|."""
    a = np.asarray(u, dtype=np.float64)
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return float(out) if out.ndim == 0 else out


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], point, h: float = DEFAULT_FD_STEP
) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    ``point`` may have any shape; the result has the same shape.
    """
    if not h > 0:
        raise InvalidInputError("finite-difference step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """max |a - b| scaled by the larger of the two max-norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
