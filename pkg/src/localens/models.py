"""Data-generating processes for the simulation studies.

Two models live here: a conjugate Gaussian one-step setup whose prior
covariance is a Gaspari-Cohn correlation matrix on the ring, and the Lorenz96
chaotic flow integrated with classical RK4 for cycled twin experiments.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import Ensemble, LinearGaussianObs, cholesky_psd, gc_taper, _distance_matrix
from .errors import DivergenceError

__all__ = [
    "ConjugateSetup",
    "ObservationModel",
    "Lorenz96Config",
    "build_gc_covariance",
    "sample_gaussian",
    "observe",
    "lorenz96_drift",
    "rk4_step",
    "integrate",
    "propagate",
    "lorenz96_initial_state",
    "climatology_ensemble",
]


def build_gc_covariance(n: int, support_points: int) -> np.ndarray:
    """Gaspari-Cohn correlation matrix on a ring of ``n`` sites.

    Entry (i, j) is the GC kernel with half-support ``support_points / 2``
    evaluated at the periodic distance, so correlations vanish once sites are
    ``support_points`` apart and the diagonal is exactly one.
    """
    if support_points % 2 != 0 or support_points <= 0:
        raise ValueError(f"support_points must be a positive even integer, got {support_points}")
    if support_points > n:
        raise ValueError(f"support {support_points} exceeds grid size {n}")
    cov = gc_taper(_distance_matrix(n), support_points / 2.0)
    # GC is a valid correlation on the ring at this support; guard round-off.
    smallest = np.linalg.eigvalsh(cov).min()
    if smallest < -1e-8:
        raise ValueError(f"GC covariance unexpectedly indefinite (min eig {smallest:.3e})")
    if smallest < 0.0:
        cov = cov - smallest * np.eye(n)
    return cov


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Fixed observation operator y = H x + N(0, R), with the site of each row."""

    H: np.ndarray
    R: np.ndarray
    obs_sites: np.ndarray

    @classmethod
    def identity(cls, n: int, noise_var: float = 1.0) -> "ObservationModel":
        """Observe every component with independent noise of variance ``noise_var``."""
        return cls(np.eye(n), noise_var * np.eye(n), np.arange(n))

    @classmethod
    def every_kth(cls, n: int, spacing: int, noise_var: float = 1.0) -> "ObservationModel":
        """Observe sites 0, spacing, 2*spacing, ... with independent noise."""
        sites = np.arange(0, n, spacing)
        H = np.zeros((sites.size, n))
        H[np.arange(sites.size), sites] = 1.0
        return cls(H, noise_var * np.eye(sites.size), sites)

    @cached_property
    def chol_r(self) -> np.ndarray:
        return cholesky_psd(self.R)


def observe(x: np.ndarray, model: ObservationModel, rng: np.random.Generator) -> LinearGaussianObs:
    """Draw y = H x + eps with eps ~ N(0, R) and package it with the operator."""
    x = np.asarray(x, dtype=float)
    eps = model.chol_r @ rng.standard_normal(model.H.shape[0])
    return LinearGaussianObs(model.H @ x + eps, model.H, model.R, model.obs_sites)


def sample_gaussian(mean, cov, k: int, rng: np.random.Generator) -> Ensemble:
    """Ensemble of k i.i.d. N(mean, cov) columns, drawn through the Cholesky factor."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    factor = cholesky_psd(cov)
    return Ensemble(mean[:, None] + factor @ rng.standard_normal((mean.size, k)))


@dataclass(frozen=True, eq=False)
class ConjugateSetup:
    """One-step conjugate experiment: x ~ N(0, Sigma), y | x ~ N(H x, R).

    The prior covariance is the unit-diagonal GC matrix of
    :func:`build_gc_covariance`; observations default to every component with
    unit noise.
    """

    n_sites: int
    support_points: int = 20
    obs_noise_var: float = 1.0

    @cached_property
    def sigma_p(self) -> np.ndarray:
        return build_gc_covariance(self.n_sites, self.support_points)

    @cached_property
    def chol_p(self) -> np.ndarray:
        return cholesky_psd(self.sigma_p)

    @cached_property
    def observation_model(self) -> ObservationModel:
        return ObservationModel.identity(self.n_sites, self.obs_noise_var)

    def draw_truth(self, rng: np.random.Generator) -> np.ndarray:
        return self.chol_p @ rng.standard_normal(self.n_sites)

    def draw_ensemble(self, k: int, rng: np.random.Generator) -> Ensemble:
        return Ensemble(self.chol_p @ rng.standard_normal((self.n_sites, k)))


# ---------------------------------------------------------------------------
# Lorenz96


def lorenz96_drift(x: np.ndarray, forcing: float) -> np.ndarray:
    """Lorenz96 tendency (x_{j+1} - x_{j-2}) x_{j-1} - x_j + F with cyclic indices.

    Works on a single state (dim,) or an ensemble matrix (dim, k).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 4:
        raise ValueError(f"Lorenz96 needs dimension >= 4, got {x.shape[0]}")
    return (np.roll(x, -1, axis=0) - np.roll(x, 2, axis=0)) * np.roll(x, 1, axis=0) - x + forcing


def rk4_step(x: np.ndarray, dt: float, forcing: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of the Lorenz96 flow."""
    k1 = lorenz96_drift(x, forcing)
    k2 = lorenz96_drift(x + 0.5 * dt * k1, forcing)
    k3 = lorenz96_drift(x + 0.5 * dt * k2, forcing)
    k4 = lorenz96_drift(x + dt * k3, forcing)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_count(duration: float, dt: float) -> int:
    steps = round(duration / dt)
    if abs(steps * dt - duration) > 1e-9 * max(1.0, abs(duration)):
        raise ValueError(f"duration {duration} is not a multiple of dt {dt}")
    return steps


def integrate(x: np.ndarray, duration: float, dt: float, forcing: float) -> np.ndarray:
    """Integrate a state (or ensemble matrix) forward by ``duration``.

    Raises DivergenceError carrying the step index if the state blows up.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(_step_count(duration, dt)):
            x = rk4_step(x, dt, forcing)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"state became non-finite at step {step}", step)
    return x


def propagate(e: Ensemble, duration: float, dt: float, forcing: float) -> Ensemble:
    """Propagate every particle independently through the Lorenz96 flow."""
    return Ensemble(integrate(e.values, duration, dt, forcing))


@dataclass(frozen=True)
class Lorenz96Config:
    """Cycled Lorenz96 twin-experiment settings.

    The assimilation interval must be an integer multiple of the integration
    step.  Observations default to every component with unit noise
    (``obs_spacing = 2`` gives every second component).
    """

    dim: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    assim_interval: float = 0.4
    obs_spacing: int = 1
    obs_noise_var: float = 1.0
    spin_up_time: float = 100.0

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError(f"dim must be >= 4, got {self.dim}")
        if self.dt <= 0 or self.assim_interval <= 0:
            raise ValueError("dt and assim_interval must be positive")
        _step_count(self.assim_interval, self.dt)  # validates the multiple

    def observation_model(self) -> ObservationModel:
        if self.obs_spacing == 1:
            return ObservationModel.identity(self.dim, self.obs_noise_var)
        return ObservationModel.every_kth(self.dim, self.obs_spacing, self.obs_noise_var)


def lorenz96_initial_state(cfg: Lorenz96Config, rng: np.random.Generator) -> np.ndarray:
    """Spun-up truth state: perturb the x = F fixed point, run to the attractor."""
    x0 = cfg.forcing + 0.1 * rng.standard_normal(cfg.dim)
    return integrate(x0, cfg.spin_up_time, cfg.dt, cfg.forcing)


def climatology_ensemble(cfg: Lorenz96Config, k: int, rng: np.random.Generator) -> Ensemble:
    """Initial ensemble of k states sampled at random times of a long free run."""
    state = lorenz96_initial_state(cfg, rng)
    gaps = rng.uniform(0.2, 3.8, size=k)
    columns = np.empty((cfg.dim, k))
    for i, gap in enumerate(gaps):
        duration = max(1, round(gap / cfg.dt)) * cfg.dt
        state = integrate(state, duration, cfg.dt, cfg.forcing)
        columns[:, i] = state
    return Ensemble(columns)
