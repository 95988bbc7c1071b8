"""Global ensemble update steps: particle filter, stochastic EnKF, and EnKPF.

All three transform a predictive ensemble and a linear-Gaussian observation
into (an approximate sample from) the filtering distribution:

* ``pf_update``     reweights particles by their likelihood and resamples.
* ``enkf_update``   applies the Kalman gain of the sample covariance to each
  particle with stochastically perturbed observations.
* ``enkpf_update``  interpolates between the two: a gamma-power EnKF stage
  with inflated observation noise R/gamma, followed by a (1-gamma)-power
  particle-filter stage on the intermediate ensemble.  gamma = 0 recovers the
  PF, gamma = 1 the EnKF.

Randomness contract: every update takes an explicit ``numpy.random.Generator``
and/or resampling offset ``u``.  ``enkf_update`` consumes one standard-normal
(d, k) draw; ``enkpf_update`` consumes two (stage 1 then stage 2), for every
gamma, so the stream position never depends on the gamma value.  Likelihoods
are evaluated in log space with max subtraction, so weights survive dimensions
where the raw Gaussian densities underflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import (
    Ensemble,
    LinearGaussianObs,
    ensemble_covariance,
    ess,
    solve_spd,
)
from .errors import DegenerateWeightsError
from .resampling import systematic_resample

__all__ = [
    "GammaPolicy",
    "EnkpfDiagnostics",
    "EnkpfMixtureParams",
    "pf_update",
    "enkf_gain",
    "enkf_update",
    "enkpf_update",
    "enkpf_mixture_params",
    "select_gamma",
]

# The adaptive gamma search runs on the lattice j / GAMMA_LATTICE, j = 0..GAMMA_LATTICE,
# bisected to single-cell resolution (8 halvings).
GAMMA_LATTICE = 256


@dataclass(frozen=True)
class GammaPolicy:
    """How the EnKF/PF interpolation weight gamma is chosen.

    ``fixed`` always returns ``fixed_value``.  ``adaptive`` searches for the
    smallest lattice gamma whose particle-stage weights have an equivalent
    sample size between ``ess_lo * k`` and ``ess_hi * k``.
    """

    mode: str
    fixed_value: float | None = None
    ess_lo: float | None = None
    ess_hi: float | None = None

    def __post_init__(self):
        if self.mode == "fixed":
            if self.fixed_value is None or not 0.0 <= self.fixed_value <= 1.0:
                raise ValueError(f"fixed gamma must lie in [0, 1], got {self.fixed_value}")
        elif self.mode == "adaptive":
            if self.ess_lo is None or self.ess_hi is None:
                raise ValueError("adaptive policy needs ess_lo and ess_hi")
            if not 0.0 < self.ess_lo < self.ess_hi <= 1.0:
                raise ValueError(
                    f"need 0 < ess_lo < ess_hi <= 1, got ({self.ess_lo}, {self.ess_hi})"
                )
        else:
            raise ValueError(f"unknown gamma policy mode {self.mode!r}")

    @classmethod
    def fixed(cls, value: float) -> "GammaPolicy":
        return cls(mode="fixed", fixed_value=float(value))

    @classmethod
    def adaptive(cls, ess_lo: float, ess_hi: float) -> "GammaPolicy":
        return cls(mode="adaptive", ess_lo=float(ess_lo), ess_hi=float(ess_hi))


@dataclass(frozen=True, eq=False)
class EnkpfDiagnostics:
    """Per-update EnKPF bookkeeping: gamma, particle-stage weights, ESS fraction."""

    gamma: float
    weights: np.ndarray
    ess_fraction: float


class EnkpfMixtureParams(NamedTuple):
    """Deterministic pieces of the EnKPF posterior mixture for a given prior covariance.

    ``gain1``: first-stage gain K1 = S H' (H S H' + R/gamma)^-1.
    ``q``: spread covariance of the first stage, (1/gamma) K1 R K1'.
    ``weight_cov``: covariance H Q H' + R/(1-gamma) of the particle-stage
    weights (None at gamma = 1, where the weights are uniform).
    ``gain2``: second-stage gain K2 = Q H' weight_cov^-1.
    ``component_cov``: covariance of one mixture component,
    (I - K2 H) K1 (R/gamma) K1' (I - K2 H)' + K2 (R/(1-gamma)) K2'.
    """

    gain1: np.ndarray
    q: np.ndarray
    weight_cov: np.ndarray | None
    gain2: np.ndarray
    component_cov: np.ndarray


def _log_gaussian_weights(resid: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Columnwise -0.5 r' cov^-1 r (the shared normalizing constant is dropped)."""
    solved = solve_spd(cov, resid)
    return -0.5 * np.einsum("ij,ij->j", resid, solved)


def _weights_from_logs(logw: np.ndarray) -> np.ndarray:
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateWeightsError("all particle log-likelihoods are -inf")
    w = np.exp(logw - top)
    return w / w.sum()


def pf_update(e: Ensemble, obs: LinearGaussianObs, u: float) -> tuple[Ensemble, np.ndarray]:
    """Particle-filter update: likelihood weights plus balanced resampling.

    Returns the resampled ensemble and the normalized weights it was drawn
    from.  Raises DegenerateWeightsError when every particle has numerically
    zero likelihood.
    """
    resid = obs.y[:, None] - obs.H @ e.values
    logw = _log_gaussian_weights(resid, obs.R)
    w = _weights_from_logs(logw)
    idx = systematic_resample(w, e.k, u)
    return Ensemble(e.values[:, idx]), w


def enkf_gain(sigma_p: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Kalman gain K = S H' (H S H' + R)^-1, via an SPD solve (no explicit inverse)."""
    sigma_p = np.atleast_2d(np.asarray(sigma_p, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    cross = sigma_p @ H.T
    innovation_cov = H @ cross + R
    return solve_spd(innovation_cov, cross.T).T


def enkf_update(e: Ensemble, obs: LinearGaussianObs, rng: np.random.Generator) -> Ensemble:
    """Stochastic EnKF update with perturbed observations.

    Each particle moves to ``x + K (y + eps - H x)`` with eps ~ N(0, R) drawn
    independently per particle and K the gain of the unbiased sample
    covariance.
    """
    noise = obs.chol_r @ rng.standard_normal((obs.d, e.k))
    gain = enkf_gain(ensemble_covariance(e), obs.H, obs.R)
    innovations = obs.y[:, None] + noise - obs.H @ e.values
    return Ensemble(e.values + gain @ innovations)


def enkpf_mixture_params(
    sigma_p: np.ndarray, H: np.ndarray, R: np.ndarray, gamma: float
) -> EnkpfMixtureParams:
    """Gains and covariances of the EnKPF mixture for prior covariance ``sigma_p``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    sigma_p = np.atleast_2d(np.asarray(sigma_p, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = sigma_p.shape[0]
    d = H.shape[0]
    if gamma == 0.0:
        zero_nd = np.zeros((n, d))
        return EnkpfMixtureParams(zero_nd, np.zeros((n, n)), R.copy(), zero_nd, np.zeros((n, n)))
    gain1 = solve_spd(H @ sigma_p @ H.T + R / gamma, (sigma_p @ H.T).T).T
    q = gain1 @ R @ gain1.T / gamma
    if gamma == 1.0:
        return EnkpfMixtureParams(gain1, q, None, np.zeros((n, d)), q)
    weight_cov = H @ q @ H.T + R / (1.0 - gamma)
    gain2 = solve_spd(weight_cov, (q @ H.T).T).T
    shrink = np.eye(n) - gain2 @ H
    component_cov = (
        shrink @ gain1 @ (R / gamma) @ gain1.T @ shrink.T
        + gain2 @ (R / (1.0 - gamma)) @ gain2.T
    )
    return EnkpfMixtureParams(gain1, q, weight_cov, gain2, component_cov)


def _enkpf_stages(
    x: np.ndarray,
    cov: np.ndarray,
    y: np.ndarray,
    H: np.ndarray,
    R: np.ndarray,
    gamma: float,
    u: float,
    e1: np.ndarray,
    e2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Core two-stage EnKPF on raw arrays.

    ``e1`` and ``e2`` are observation-noise draws with covariance R; they get
    rescaled internally to R/gamma and R/(1-gamma).  Returns the updated
    particle matrix, the particle-stage weights alpha, and the resampling
    indices.
    """
    k = x.shape[1]
    hx = H @ x
    if gamma == 0.0:
        alpha = _weights_from_logs(_log_gaussian_weights(y[:, None] - hx, R))
        idx = systematic_resample(alpha, k, u)
        return x[:, idx], alpha, idx
    cross = cov @ H.T
    a = H @ cross
    b1 = a + R / gamma
    gain1 = solve_spd(b1, cross.T).T
    nu = x + gain1 @ (y[:, None] - hx)
    if gamma == 1.0:
        alpha = np.full(k, 1.0 / k)
        return nu + gain1 @ e1, alpha, np.arange(k)
    h_gain1 = solve_spd(b1, a).T
    h_nu = hx + h_gain1 @ (y[:, None] - hx)
    weight_cov = h_gain1 @ R @ h_gain1.T / gamma + R / (1.0 - gamma)
    alpha = _weights_from_logs(_log_gaussian_weights(y[:, None] - h_nu, weight_cov))
    idx = systematic_resample(alpha, k, u)
    e1_scaled = e1 / np.sqrt(gamma)
    x_mid = nu[:, idx] + gain1 @ e1_scaled
    h_x_mid = h_nu[:, idx] + h_gain1 @ e1_scaled
    q_ht = gain1 @ R @ h_gain1.T / gamma
    gain2 = solve_spd(weight_cov, q_ht.T).T
    e2_scaled = e2 / np.sqrt(1.0 - gamma)
    out = x_mid + gain2 @ (y[:, None] + e2_scaled - h_x_mid)
    return out, alpha, idx


def enkpf_update(
    e: Ensemble,
    obs: LinearGaussianObs,
    gamma: float,
    u: float,
    rng: np.random.Generator,
) -> tuple[Ensemble, EnkpfDiagnostics]:
    """Two-stage ensemble Kalman particle filter update.

    Stage 1 applies an EnKF step against the tempered observation covariance
    R/gamma, producing shifted particles and a spread covariance Q.  Stage 2
    weights those particles by the remaining (1-gamma) likelihood power,
    resamples with the balanced scheme at offset ``u``, and applies the
    second-stage gain with freshly perturbed observations.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    e1 = obs.chol_r @ rng.standard_normal((obs.d, e.k))
    e2 = obs.chol_r @ rng.standard_normal((obs.d, e.k))
    cov = ensemble_covariance(e)
    out, alpha, _ = _enkpf_stages(e.values, cov, obs.y, obs.H, obs.R, gamma, u, e1, e2)
    diag = EnkpfDiagnostics(gamma=gamma, weights=alpha, ess_fraction=ess(alpha) / e.k)
    return Ensemble(out), diag


def _alpha_weights(
    a: np.ndarray, hx: np.ndarray, y: np.ndarray, R: np.ndarray, gamma: float
) -> np.ndarray:
    """EnKPF particle-stage weights from precomputed projections.

    ``a`` is H S H' for the (possibly tapered, possibly restricted) prior
    covariance S in play, and ``hx`` the particles mapped through the same
    observation rows.  Only the weights are computed, no state update.
    """
    k = hx.shape[1]
    if gamma == 1.0:
        return np.full(k, 1.0 / k)
    if gamma == 0.0:
        return _weights_from_logs(_log_gaussian_weights(y[:, None] - hx, R))
    b1 = a + R / gamma
    h_gain1 = solve_spd(b1, a).T
    h_nu = hx + h_gain1 @ (y[:, None] - hx)
    weight_cov = h_gain1 @ R @ h_gain1.T / gamma + R / (1.0 - gamma)
    return _weights_from_logs(_log_gaussian_weights(y[:, None] - h_nu, weight_cov))


def _bisect_gamma(alpha_of_gamma: Callable[[float], np.ndarray], policy: GammaPolicy) -> float:
    """Smallest lattice gamma whose weights reach the target ESS band.

    The ESS fraction of the stage weights is (numerically) nondecreasing in
    gamma, so eight bisection steps on the 1/256 lattice bracket the lower
    band edge.  Degenerate weights count as ESS fraction 0.
    """

    def fraction(gamma: float) -> float:
        try:
            w = alpha_of_gamma(gamma)
        except DegenerateWeightsError:
            return 0.0
        return ess(w) / w.size

    if fraction(1.0) < policy.ess_lo:
        return 1.0
    if fraction(0.0) >= policy.ess_lo:
        # Covers both "already inside the band at gamma 0" and the clamp when
        # even gamma 0 sits above the band.
        return 0.0
    lo, hi = 0, GAMMA_LATTICE
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fraction(mid / GAMMA_LATTICE) < policy.ess_lo:
            lo = mid
        else:
            hi = mid
    return hi / GAMMA_LATTICE


def select_gamma(e: Ensemble, obs: LinearGaussianObs, policy: GammaPolicy) -> float:
    """Pick gamma per the policy, evaluating only stage weights (never a full update)."""
    if policy.mode == "fixed":
        return policy.fixed_value
    cov = ensemble_covariance(e)
    a = obs.H @ cov @ obs.H.T
    hx = obs.H @ e.values
    return _bisect_gamma(lambda g: _alpha_weights(a, hx, obs.y, obs.R, g), policy)
