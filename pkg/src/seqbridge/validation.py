"""Input validation helpers.

Small checks shared by the numerical core and the estimator API.  They
normalize array dtypes and raise :class:`~seqbridge.errors.ShapeError`
or :class:`~seqbridge.errors.DomainError` with readable messages.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "as_tokens",
    "as_onehot",
    "tokens_from_onehot",
    "check_unit_interval",
    "check_finite",
    "check_same_length",
]


def as_tokens(tokens, K: int) -> np.ndarray:
    """Validate a 1-D integer token vector with entries in ``[0, K)``."""
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise ShapeError(f"token array must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ShapeError("token array must be integer-valued")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= K):
        raise DomainError(f"token indices must lie in [0, {K}), got range "
                          f"[{arr.min()}, {arr.max()}]")
    return arr


def as_onehot(tokens, K: int) -> np.ndarray:
    """L x K one-hot float matrix for a token vector."""
    toks = as_tokens(tokens, K)
    out = np.zeros((toks.size, K), dtype=np.float64)
    out[np.arange(toks.size), toks] = 1.0
    return out


def tokens_from_onehot(onehot) -> np.ndarray:
    arr = np.asarray(onehot, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"one-hot matrix must be 2-D, got shape {arr.shape}")
    rows = arr.sum(axis=1)
    if not np.allclose(rows, 1.0, atol=1e-9):
        raise ShapeError("one-hot rows must each sum to 1")
    return arr.argmax(axis=1).astype(np.int64)


def check_unit_interval(value: float, name: str) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise DomainError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_finite(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_same_length(a, b, what: str = "sequences"):
    if len(a) != len(b):
        raise ShapeError(f"{what} must have equal length, got {len(a)} and {len(b)}")
