"""Empirical error measures: MSE of the ensemble mean and of per-particle increments."""

from __future__ import annotations

import numpy as np

from .core import Ensemble, ensemble_mean

__all__ = ["mse_x", "mse_dx", "relative_mse"]


def mse_x(e: Ensemble, truth: np.ndarray) -> float:
    """Per-site squared error of the ensemble mean against the true state."""
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if truth.size != e.n_sites:
        raise ValueError(f"truth has {truth.size} sites, ensemble has {e.n_sites}")
    return float(np.mean((ensemble_mean(e) - truth) ** 2))


def mse_dx(e: Ensemble, truth: np.ndarray) -> float:
    """Per-site squared error of cyclic lag-one increments, per particle, then averaged.

    Increment fields measure spatial roughness: a constant offset shared by
    all particles does not register, resampling discontinuities do.
    """
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if truth.size != e.n_sites:
        raise ValueError(f"truth has {truth.size} sites, ensemble has {e.n_sites}")
    inc = np.roll(e.values, -1, axis=0) - e.values
    inc_truth = np.roll(truth, -1) - truth
    return float(np.mean((inc - inc_truth[:, None]) ** 2))


def relative_mse(value: float, reference: float) -> float:
    """Error relative to a positive reference (1 = as good as the reference)."""
    if not reference > 0:
        raise ValueError(f"reference must be positive, got {reference}")
    return value / reference
