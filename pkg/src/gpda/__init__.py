"""Gaussian-process discriminant analysis for functional data with location selection."""

from .banded import SymTridiagonal, BandedCholeskyFactor
from .engine import FitOptions, compute_elbo, fit, initialize
from .sde import GridSpec
from .state import FunctionalDataset, Hyperparams, ModelState

__version__ = "0.1.0"

__all__ = [
    "SymTridiagonal",
    "BandedCholeskyFactor",
    "FitOptions",
    "compute_elbo",
    "fit",
    "initialize",
    "GridSpec",
    "FunctionalDataset",
    "Hyperparams",
    "ModelState",
]
