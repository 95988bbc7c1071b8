"""Balanced (systematic) resampling.

Systematic resampling draws the k points (u + j)/k, j = 0..k-1, for a single
shared offset u, and selects particle i whenever a point falls inside its
cumulative-weight interval.  The resulting counts satisfy the balanced bound
floor(k w_i) <= N_i <= ceil(k w_i), and the returned indices are sorted, so
runs of identical ancestors are contiguous.  The offset is always an explicit
argument: the caller owns the randomness, and the localized particle filter
reuses one offset across all grid sites to keep neighboring selections
coherent.
"""

from __future__ import annotations

import numpy as np

from .core import Ensemble

__all__ = ["systematic_resample", "resample_ensemble"]


def systematic_resample(w, k: int, u: float) -> np.ndarray:
    """Indices of the particles selected by systematic resampling.

    Parameters
    ----------
    w : array_like
        Normalized weights.
    k : int
        Number of indices to draw (usually ``len(w)``).
    u : float
        Offset in [0, 1), shared by all k selection points.

    Returns
    -------
    ndarray of int, shape (k,), sorted ascending.
    """
    w = np.asarray(w, dtype=float)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0.0 <= u < 1.0:
        raise ValueError(f"offset u must lie in [0, 1), got {u}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to one")
    points = (u + np.arange(k)) / k
    cumulative = np.cumsum(w)
    idx = np.searchsorted(cumulative, points, side="right")
    # Round-off in the cumulative sum can leave the last point past cum[-1].
    return np.minimum(idx, w.size - 1)


def resample_ensemble(e: Ensemble, w, u: float) -> Ensemble:
    """Ensemble whose column i is column idx[i] of the input, idx from systematic resampling."""
    idx = systematic_resample(w, e.k, u)
    return Ensemble(e.values[:, idx])
