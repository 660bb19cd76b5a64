"""Error metrics for maps and localization."""

from __future__ import annotations

import numpy as np


def map_error(f_est: np.ndarray, f_true: np.ndarray) -> float:
    """Normalized L1 map error: mean over APs of mean absolute cell error."""
    f_est = np.asarray(f_est, dtype=np.float64)
    f_true = np.asarray(f_true, dtype=np.float64)
    if f_est.shape != f_true.shape:
        raise ValueError(f"map shape mismatch: {f_est.shape} vs {f_true.shape}")
    return float(np.mean(np.abs(f_est - f_true)))


def localization_quantile(distances, q: float = 0.8) -> float:
    """Empirical q-quantile, lower nearest-rank convention.

    The returned value is the ceil(q*m)-th smallest distance (1-indexed),
    with a tiny guard so floating noise in q*m does not bump the rank.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("cannot take a quantile of an empty block")
    rank = int(np.ceil(q * d.size - 1e-9))
    rank = min(max(rank, 1), d.size)
    return float(np.partition(d, rank - 1)[rank - 1])
