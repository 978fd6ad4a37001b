"""Inverse-weight truncation."""

import math
from typing import Any

import numpy as np

Array = np.ndarray[Any, np.dtype[np.float64]]


def weight_cap(weights: Array, percentile: float) -> float:
    """Nearest-rank percentile of ``weights``.

    Raises:
        ValueError: Empty or negative weights, or percentile outside (0, 100]
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("Cannot truncate an empty weight vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("Weights must be finite and non-negative")
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"Percentile must be in (0, 100], got {percentile}")
    rank = max(1, math.ceil(percentile * w.size / 100.0 - 1e-9))
    return float(np.sort(w)[rank - 1])


def truncate_weights(weights: Array, percentile: float) -> Array:
    """Cap weights above their nearest-rank percentile, keeping order."""
    w = np.asarray(weights, dtype=np.float64)
    return np.minimum(w, weight_cap(w, percentile))
