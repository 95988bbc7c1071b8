"""Exception types raised by the filtering and experiment code."""


class LocalensError(Exception):
    """Base class for all library-specific errors."""


class SingularMatrixError(LocalensError):
    """A matrix that must be positive definite could not be factorized."""


class DegenerateWeightsError(LocalensError):
    """Every particle received zero likelihood; weights cannot be normalized."""


class DivergenceError(LocalensError):
    """Model integration produced a non-finite state.

    Attributes
    ----------
    step_index : int
        Index of the integration step (or assimilation cycle) at which the
        state first became non-finite.
    """

    def __init__(self, message, step_index):
        super().__init__(message)
        self.step_index = step_index


class GridResolutionError(LocalensError):
    """A discretization grid is too coarse or too narrow for the requested density."""
