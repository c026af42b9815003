"""Exception types shared across the toolkit."""


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations.

    Carries the last iterate so callers can inspect or restart. Attributes
    beyond ``last_state`` depend on the solver (residual, duality gap, ...).
    """

    def __init__(self, message, last_state=None, **info):
        super().__init__(message)
        self.last_state = last_state
        self.info = info


class AccuracyError(RuntimeError):
    """A result failed its internal accuracy check (quadrature doubling,
    power-iteration residual). Carries the best available estimate."""

    def __init__(self, message, estimate=None, residual=None):
        super().__init__(message)
        self.estimate = estimate
        self.residual = residual


class DegeneratePotentialError(ValueError):
    """Raised when an operation needs more regularity than the potential has
    (e.g. proximal steps or saddle solves with the hard-margin limit)."""


class DegenerateLayerError(ValueError):
    """A layer's weight matrix has zero spectral norm, so norm ratios are
    undefined."""


class ParseError(ValueError):
    """A config or data file failed validation; the message names the
    offending field."""
