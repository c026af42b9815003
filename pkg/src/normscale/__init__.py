"""Numerical toolkit for norm-indexed learning curves.

Replica-symmetric saddle points for fixed-norm linear classifiers, gradient
descent on the free-norm counterpart, spectral complexity of deep networks,
a small from-scratch deep trainer, and the scaling-law analysis that ties
the pieces together.
"""

__version__ = "0.1.0"

from .errors import (
    AccuracyError,
    ConvergenceError,
    DegenerateLayerError,
    DegeneratePotentialError,
    ParseError,
)
from .potentials import MarginPotential
from .quadrature import QuadratureConfig

__all__ = [
    "__version__",
    "AccuracyError",
    "ConvergenceError",
    "DegenerateLayerError",
    "DegeneratePotentialError",
    "ParseError",
    "MarginPotential",
    "QuadratureConfig",
]
