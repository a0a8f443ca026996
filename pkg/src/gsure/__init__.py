"""Stein unbiased risk estimation for exponential families.

Submodules: ``core`` (generic risk estimate and divergence backends),
``gaussian`` (linear Gaussian models and shrinkage estimators),
``regselect`` (regularization-parameter selection), ``sparse`` (l1-penalized
least squares), ``wavelets`` and ``shrink`` (wavelet denoising),
``problems`` (test problems and I/O), ``experiments`` and ``cli``.
"""

__version__ = "0.1.0"

from .core import (
    EstimatorMap,
    ExponentialFamilyModel,
    RiskScore,
    linear_map,
    mc_unbiasedness_check,
    risk_score,
    sure_score,
)
from .gaussian import LinearGaussianModel, SeparableGaussianModel, blind_minimax, gaussian_sure, ml_estimate
from .rng import SeededRng

__all__ = [
    "EstimatorMap",
    "ExponentialFamilyModel",
    "LinearGaussianModel",
    "RiskScore",
    "SeededRng",
    "SeparableGaussianModel",
    "blind_minimax",
    "gaussian_sure",
    "linear_map",
    "mc_unbiasedness_check",
    "ml_estimate",
    "risk_score",
    "sure_score",
]
