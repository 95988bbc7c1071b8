"""Exact conjugate-posterior computations and a brute-force 1-D density reference.

With a zero-mean Gaussian prior and a linear-Gaussian likelihood the posterior
is available in closed form; these routines provide the analytic error
references the simulation studies normalize against, plus a small grid-based
posterior evaluator used to cross-check the filter updates in one dimension.
"""

from __future__ import annotations

import numpy as np

from .core import LinearGaussianObs, solve_spd
from .errors import GridResolutionError

__all__ = [
    "conjugate_posterior",
    "optimal_mse_x",
    "optimal_mse_dx",
    "grid_posterior_1d",
    "particle_posterior_weights",
]


def conjugate_posterior(
    sigma_p: np.ndarray, H: np.ndarray, R: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance for a zero-mean Gaussian prior.

    mean = S H' (H S H' + R)^-1 y,  cov = S - S H' (H S H' + R)^-1 H S.
    """
    sigma_p = np.atleast_2d(np.asarray(sigma_p, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    cross = sigma_p @ H.T
    innovation_cov = H @ cross + R
    gain = solve_spd(innovation_cov, cross.T).T
    mean = gain @ y
    cov = sigma_p - gain @ cross.T
    return mean, 0.5 * (cov + cov.T)


def optimal_mse_x(sigma_f: np.ndarray) -> float:
    """Per-site MSE of the exact posterior mean: trace of the posterior covariance / N.

    With a unit-diagonal prior this normalization puts the no-data reference
    at exactly 1.
    """
    sigma_f = np.atleast_2d(np.asarray(sigma_f, dtype=float))
    return float(np.trace(sigma_f)) / sigma_f.shape[0]


def optimal_mse_dx(sigma_f: np.ndarray) -> float:
    """Expected per-site MSE of lag-one increments under the exact posterior.

    For cyclic increments D_j = x_{j+1} - x_j the posterior variance of D_j is
    cov_{j+1,j+1} + cov_{jj} - 2 cov_{j+1,j}; the truth and an independent
    posterior particle each contribute one copy, hence the factor 2.
    """
    sigma_f = np.atleast_2d(np.asarray(sigma_f, dtype=float))
    n = sigma_f.shape[0]
    diag = np.diag(sigma_f)
    diag_next = np.roll(diag, -1)
    cross = sigma_f[np.arange(n), (np.arange(n) + 1) % n]
    return float(np.mean(2.0 * (diag_next + diag - 2.0 * cross)))


def grid_posterior_1d(
    prior_pdf, obs: LinearGaussianObs, x_grid: np.ndarray
) -> np.ndarray:
    """Pointwise prior times likelihood, renormalized on a uniform scalar grid.

    ``prior_pdf`` is a callable density of the scalar state.  Raises
    GridResolutionError when the grid visibly truncates the posterior
    (boundary mass above 1e-6).
    """
    x_grid = np.asarray(x_grid, dtype=float)
    if x_grid.ndim != 1 or x_grid.size < 3:
        raise GridResolutionError("need a 1-D grid with at least 3 points")
    dx = np.diff(x_grid)
    if not np.allclose(dx, dx[0], rtol=1e-8):
        raise GridResolutionError("grid must be uniform")
    unnorm = np.asarray([prior_pdf(x) for x in x_grid], dtype=float) * _likelihood_1d(
        obs, x_grid
    )
    total = unnorm.sum() * dx[0]
    if total <= 0:
        raise GridResolutionError("posterior mass on the grid is zero")
    pdf = unnorm / total
    if (pdf[0] + pdf[-1]) * dx[0] > 1e-6:
        raise GridResolutionError("posterior mass leaks outside the grid")
    return pdf


def particle_posterior_weights(particles: np.ndarray, obs: LinearGaussianObs) -> np.ndarray:
    """Posterior weights of a point-mass (particle) prior: normalized likelihoods."""
    particles = np.asarray(particles, dtype=float).reshape(-1)
    lik = _likelihood_1d(obs, particles)
    total = lik.sum()
    if total <= 0:
        raise GridResolutionError("all particles have zero likelihood")
    return lik / total


def _likelihood_1d(obs: LinearGaussianObs, states: np.ndarray) -> np.ndarray:
    """Gaussian likelihood of each scalar state (up to stabilization, renormalized later)."""
    if obs.n_sites != 1:
        raise ValueError("the 1-D reference handles scalar states only")
    resid = obs.y[:, None] - obs.H @ states[None, :]
    quad = np.einsum("ij,ij->j", resid, solve_spd(obs.R, resid))
    logl = -0.5 * quad
    return np.exp(logl - logl.max())
