"""Hierarchical exponential-family posterior approximation.

Fits a hierarchy of exponential-family conditionals to an unnormalized
Bayesian posterior by stochastic linear regression on the sufficient
statistics, with an online damped optimizer, a fixed-seed batch
natural-gradient optimizer, and an R-squared diagnostic of fit quality.
"""

from .families import AffineSupport, Beta, GaussianUni, InvGamma
from .sparse_gaussian import SparseGaussian, SparsityPattern
from .graph import (
    ApproximationGraph,
    Block,
    BlockSpec,
    ExpFamilyPrior,
    FeatureBasis,
    FlatLocationPrior,
    HalfCauchyScalePrior,
    ModelSpec,
    VariationalState,
    build_approximation,
)
from .models import (
    Model,
    SvParams,
    exact_posterior_conjugate,
    load_series,
    make_conjugate_normal,
    make_sv_model,
    save_series,
    simulate_sv,
)
from .estimators import EstimatorKind, RegressionStats, estimate, natural_gradient, precondition
from .online import FitResult, OnlineConfig, fit_online
from .batch import BatchConfig, batch_natural_gradient, fit_batch, min_samples
from .diagnostics import QualityReport, natgrad_norm, posterior_summaries, r_squared
from .mcmc import McmcConfig, McmcResult, compare, run_metropolis

__version__ = "0.1.0"

__all__ = [
    "AffineSupport",
    "ApproximationGraph",
    "BatchConfig",
    "Beta",
    "Block",
    "BlockSpec",
    "EstimatorKind",
    "ExpFamilyPrior",
    "FeatureBasis",
    "FitResult",
    "FlatLocationPrior",
    "GaussianUni",
    "HalfCauchyScalePrior",
    "InvGamma",
    "McmcConfig",
    "McmcResult",
    "Model",
    "ModelSpec",
    "OnlineConfig",
    "QualityReport",
    "RegressionStats",
    "SparseGaussian",
    "SparsityPattern",
    "SvParams",
    "VariationalState",
    "batch_natural_gradient",
    "build_approximation",
    "compare",
    "estimate",
    "exact_posterior_conjugate",
    "fit_batch",
    "fit_online",
    "load_series",
    "make_conjugate_normal",
    "make_sv_model",
    "min_samples",
    "natgrad_norm",
    "natural_gradient",
    "posterior_summaries",
    "precondition",
    "r_squared",
    "run_metropolis",
    "save_series",
    "simulate_sv",
]
