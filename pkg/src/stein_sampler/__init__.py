"""Low-discrepancy point sets for differentiable densities by kernel Stein discrepancy minimisation."""

from .density import BetaProduct, GaussianMixture, ScoredDensity, from_spec
from .errors import (
    ConfigError,
    DegenerateSetError,
    DivergenceError,
    DomainError,
    NumericalInconsistencyError,
    ParseError,
    SteinSamplerError,
)
from .stein_kernel import KernelConfig, ksd, median_bandwidth, stein_k0, stein_kernel_matrix

__version__ = "0.1.0"

__all__ = [
    "BetaProduct",
    "ConfigError",
    "DegenerateSetError",
    "DivergenceError",
    "DomainError",
    "GaussianMixture",
    "KernelConfig",
    "NumericalInconsistencyError",
    "ParseError",
    "ScoredDensity",
    "SteinSamplerError",
    "from_spec",
    "ksd",
    "median_bandwidth",
    "stein_k0",
    "stein_kernel_matrix",
]
