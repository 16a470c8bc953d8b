"""Numerical laboratory for the pairwise-projection particle system:
kernel algebra, analytic dissipation checks, ensemble simulation and
empirical hierarchy residuals."""

from .densities import FunctionalEstimate, GaussianMixture
from .kernels import PotentialSpec
from .simulator import SimConfig, VelocityState, run_ensemble

__version__ = "0.1.0"

__all__ = [
    "FunctionalEstimate",
    "GaussianMixture",
    "PotentialSpec",
    "SimConfig",
    "VelocityState",
    "run_ensemble",
    "__version__",
]
