"""Global and localized ensemble filtering on periodic 1-D domains.

The library implements the particle filter, the stochastic ensemble Kalman
filter, and their hybrid (the ensemble Kalman particle filter), together with
four localized variants, exact conjugate-posterior references, the Lorenz96
model, and a reproducible experiment harness.
"""

from .core import (
    Ensemble,
    LinearGaussianObs,
    RingGrid,
    ensemble_covariance,
    ensemble_mean,
    ess,
    gc_taper,
    normalized_weights,
    periodic_distance,
)
from .errors import (
    DegenerateWeightsError,
    DivergenceError,
    GridResolutionError,
    LocalensError,
    SingularMatrixError,
)
from .exact import (
    conjugate_posterior,
    grid_posterior_1d,
    optimal_mse_dx,
    optimal_mse_x,
    particle_posterior_weights,
)
from .experiments import (
    ConjugateExperimentConfig,
    ExperimentRecord,
    LorenzExperimentConfig,
    read_records,
    run_conjugate_experiment,
    run_lorenz_experiment,
    substream,
    summarize_records,
    write_records,
)
from .filters import (
    EnkpfDiagnostics,
    EnkpfMixtureParams,
    GammaPolicy,
    enkf_gain,
    enkf_update,
    enkpf_mixture_params,
    enkpf_update,
    pf_update,
    select_gamma,
)
from .local import (
    LocalizationConfig,
    block_lenkpf_update,
    lenkf_update,
    local_obs_selection,
    lpf_update,
    naive_lenkpf_update,
    taper_matrix,
)
from .metrics import mse_dx, mse_x, relative_mse
from .models import (
    ConjugateSetup,
    Lorenz96Config,
    ObservationModel,
    build_gc_covariance,
    climatology_ensemble,
    integrate,
    lorenz96_drift,
    lorenz96_initial_state,
    observe,
    propagate,
    rk4_step,
    sample_gaussian,
)

__version__ = "0.1.0"
