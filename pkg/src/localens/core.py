"""Shared domain objects: ring geometry, taper kernel, ensembles, observations, weights.

Everything here is a plain value type or a pure function; instances are safe
to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg

from .errors import DegenerateWeightsError, SingularMatrixError

__all__ = [
    "RingGrid",
    "Ensemble",
    "LinearGaussianObs",
    "periodic_distance",
    "gc_taper",
    "ess",
    "normalized_weights",
    "ensemble_mean",
    "ensemble_covariance",
    "cholesky_psd",
    "solve_spd",
]

# Relative jitter added to a near-singular SPD matrix before retrying the
# factorization once.
_JITTER = 1e-10


def periodic_distance(i: int, j: int, n: int) -> int:
    """Distance between sites ``i`` and ``j`` on a ring of ``n`` sites.

    Defined as ``min(|i - j|, n - |i - j|)``: the shorter of the two arcs.
    """
    if not 0 <= i < n or not 0 <= j < n:
        raise ValueError(f"site indices ({i}, {j}) out of range for n={n}")
    delta = abs(i - j)
    return min(delta, n - delta)


def gc_taper(d, c: float):
    """Gaspari-Cohn fifth-order compactly supported correlation function.

    Parameters
    ----------
    d : float or ndarray
        Nonnegative distance(s).
    c : float
        Half-support: the kernel is 1 at d=0, decays smoothly and vanishes
        for d >= 2c.  ``c = inf`` gives the constant kernel 1 (no tapering).

    Returns
    -------
    float or ndarray in [0, 1], matching the shape of ``d``.
    """
    if not c > 0:
        raise ValueError(f"half-support must be positive, got {c}")
    arr = np.asarray(d, dtype=float)
    if np.any(arr < 0):
        raise ValueError("distances must be nonnegative")
    z = arr / c
    out = np.zeros_like(z)
    inner = z <= 1.0
    zi = z[inner]
    out[inner] = 1.0 + zi**2 * (-5.0 / 3.0 + zi * (5.0 / 8.0 + zi * (0.5 - 0.25 * zi)))
    outer = (z > 1.0) & (z < 2.0)
    zo = z[outer]
    out[outer] = (
        4.0
        + zo * (-5.0 + zo * (5.0 / 3.0 + zo * (5.0 / 8.0 + zo * (-0.5 + zo / 12.0))))
        - 2.0 / (3.0 * zo)
    )
    np.clip(out, 0.0, 1.0, out=out)
    return float(out) if np.isscalar(d) or arr.ndim == 0 else out


@lru_cache(maxsize=64)
def _distance_matrix(n: int) -> np.ndarray:
    idx = np.arange(n)
    delta = np.abs(idx[:, None] - idx[None, :])
    mat = np.minimum(delta, n - delta)
    mat.flags.writeable = False
    return mat


@dataclass(frozen=True)
class RingGrid:
    """One-dimensional periodic grid of ``n_sites`` points with unit spacing."""

    n_sites: int

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError(f"n_sites must be >= 1, got {self.n_sites}")

    def distance(self, i: int, j: int) -> int:
        return periodic_distance(i, j, self.n_sites)

    def distance_matrix(self) -> np.ndarray:
        """Read-only (n, n) matrix of pairwise ring distances."""
        return _distance_matrix(self.n_sites)


@dataclass(frozen=True, eq=False)
class Ensemble:
    """A sample of ``k`` state vectors stored as columns of an (n_sites, k) matrix."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if vals.ndim != 2:
            raise ValueError(f"ensemble values must be 2-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("ensemble values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def n_sites(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class LinearGaussianObs:
    """Observation ``y = H x + eps`` with Gaussian noise eps ~ N(0, R).

    ``obs_sites`` assigns each observation row a grid site, which is what
    localization uses to measure the distance between an observation and a
    state component.  The number of rows may be zero (no data).
    """

    y: np.ndarray
    H: np.ndarray
    R: np.ndarray
    obs_sites: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        sites = np.asarray(self.obs_sites, dtype=int).reshape(-1)
        d = y.size
        if H.shape[0] != d or R.shape != (d, d) or sites.size != d:
            raise ValueError(
                f"inconsistent observation shapes: y {y.shape}, H {H.shape}, "
                f"R {R.shape}, obs_sites {sites.shape}"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(H)) and np.all(np.isfinite(R))):
            raise ValueError("observation arrays must be finite")
        if d and not np.allclose(R, R.T, atol=1e-10):
            raise ValueError("R must be symmetric")
        n = H.shape[1]
        if d and (sites.min() < 0 or sites.max() >= n):
            raise ValueError("obs_sites indices out of range")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", 0.5 * (R + R.T))
        object.__setattr__(self, "obs_sites", sites)

    @property
    def d(self) -> int:
        return self.y.size

    @property
    def n_sites(self) -> int:
        return self.H.shape[1]

    @cached_property
    def chol_r(self) -> np.ndarray:
        """Lower Cholesky factor of R (zeros if R is the zero matrix)."""
        return cholesky_psd(self.R)

    def restrict(self, rows: np.ndarray) -> "LinearGaussianObs":
        """Observation restricted to a subset of rows."""
        rows = np.asarray(rows, dtype=int)
        return LinearGaussianObs(
            self.y[rows], self.H[rows], self.R[np.ix_(rows, rows)], self.obs_sites[rows]
        )


def normalized_weights(w) -> np.ndarray:
    """Normalize nonnegative weights to sum to one."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise DegenerateWeightsError("all weights are zero")
    return w / total


def ess(w) -> float:
    """Equivalent sample size 1 / sum(w_i^2) of a normalized weight vector."""
    w = np.asarray(w, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError("weights must be normalized and nonnegative")
    return 1.0 / float(np.sum(w**2))


def ensemble_mean(e: Ensemble) -> np.ndarray:
    """Componentwise mean over particles."""
    return e.values.mean(axis=1)


def ensemble_covariance(e: Ensemble) -> np.ndarray:
    """Unbiased (divisor k-1) sample covariance of the particles."""
    if e.k < 2:
        raise ValueError(f"covariance needs at least two particles, got k={e.k}")
    centered = e.values - e.values.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / (e.k - 1)
    return 0.5 * (cov + cov.T)


def cholesky_psd(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric PSD matrix.

    The zero matrix maps to zeros.  A factorization failure is retried once
    with a small diagonal jitter proportional to the mean diagonal, after
    which SingularMatrixError is raised.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros_like(a)
    if not np.any(a):
        return np.zeros_like(a)
    sym = 0.5 * (a + a.T)
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER * np.trace(sym) / sym.shape[0]
    try:
        return np.linalg.cholesky(sym + jitter * np.eye(sym.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"matrix is not positive semidefinite: {exc}") from exc


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive-definite ``a`` via Cholesky.

    Applies the same symmetrize-and-jitter policy as :func:`cholesky_psd`.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    sym = 0.5 * (a + a.T)
    try:
        c, low = scipy.linalg.cho_factor(sym, lower=True)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        jitter = _JITTER * np.trace(sym) / sym.shape[0]
        try:
            c, low = scipy.linalg.cho_factor(
                sym + jitter * np.eye(sym.shape[0]), lower=True
            )
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
            raise SingularMatrixError(f"SPD solve failed: {exc}") from exc
    return scipy.linalg.cho_solve((c, low), np.asarray(b, dtype=float))
