"""Approximation-quality diagnostics and posterior summaries.

The headline measure is the R-squared of the regression of the unnormalized
log posterior on the approximation's log density: with draws x_s ~ q,

    r2 = 1 - Var[log p(x, y) - log q(x)] / Var[log p(x, y)],

which equals 1 exactly when q matches the posterior (the residual is the
constant log normalizing factor). Values slightly above 1 can occur by
Monte Carlo noise and are reported raw with a clamp flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedQualityError
from .estimators import EstimatorKind
from .graph import ApproximationGraph, VariationalState
from .models import Model

DEFAULT_QUALITY_SAMPLES = 1000


@dataclass(frozen=True)
class SummaryRow:
    name: str
    mean: float
    sd: float
    q05: float
    q50: float
    q95: float


@dataclass(frozen=True)
class QualityReport:
    r_squared: float
    n_samples: int
    residual_variance: float
    logp_variance: float
    clamped: bool  # true when the raw sample estimate exceeded 1
    natgrad_norm: float | None
    summaries: tuple[SummaryRow, ...]


def _scalarize(graph: ApproximationGraph, assignment: dict) -> np.ndarray:
    parts = []
    for b in graph.blocks:
        parts.append(np.atleast_1d(np.asarray(assignment[b.name], dtype=float)))
    return np.concatenate(parts)


def _log_densities(model, graph, state, n_samples, rng):
    logp = np.empty(n_samples)
    logq = np.empty(n_samples)
    values = np.empty((n_samples, len(graph.coord_names)))
    for i in range(n_samples):
        assignment, draws = graph.ancestral_pass(state, rng)
        logp[i] = model.log_joint(assignment)
        logq[i] = sum(d.log_density for d in draws.values())
        values[i] = _scalarize(graph, assignment)
    return logp, logq, values


def r_squared(
    model: Model,
    graph: ApproximationGraph,
    state: VariationalState,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Sample estimate of the approximation R-squared (raw, unclamped)."""
    if n_samples < 10:
        raise ValueError("need at least 10 samples for a variance estimate")
    logp, logq, _ = _log_densities(model, graph, state, n_samples, rng)
    return _r2_from_densities(logp, logq)


def _r2_from_densities(logp: np.ndarray, logq: np.ndarray) -> float:
    var_p = float(np.var(logp, ddof=1))
    if var_p == 0.0 or not np.isfinite(var_p):
        raise UndefinedQualityError(
            "the log joint density is degenerate under the approximation"
        )
    var_res = float(np.var(logp - logq, ddof=1))
    return 1.0 - var_res / var_p


def natgrad_norm(
    model: Model,
    graph: ApproximationGraph,
    state: VariationalState,
    seed: int,
    n_samples: int,
    estimator: EstimatorKind = EstimatorKind(),
) -> float:
    """||f|| / sqrt(K) from one fixed-seed batch natural-gradient evaluation."""
    from .batch import BatchConfig, batch_natural_gradient

    cfg = BatchConfig(seed_star=seed, n_samples=n_samples, estimator=estimator)
    f = batch_natural_gradient(model, graph, state, cfg)
    return float(np.linalg.norm(f)) / np.sqrt(graph.n_params)


def posterior_summaries(
    graph: ApproximationGraph,
    state: VariationalState,
    n_samples: int,
    rng: np.random.Generator,
) -> tuple[SummaryRow, ...]:
    """Moment and quantile estimates per scalar unknown from joint draws."""
    values = np.empty((n_samples, len(graph.coord_names)))
    for i in range(n_samples):
        values[i] = _scalarize(graph, graph.draw_joint(state, rng))
    return _summaries_from_matrix(graph.coord_names, values)


def _summaries_from_matrix(names, values: np.ndarray) -> tuple[SummaryRow, ...]:
    q05, q50, q95 = np.quantile(values, [0.05, 0.5, 0.95], axis=0)
    means = values.mean(axis=0)
    sds = values.std(axis=0, ddof=1)
    return tuple(
        SummaryRow(name, float(means[j]), float(sds[j]), float(q05[j]),
                   float(q50[j]), float(q95[j]))
        for j, name in enumerate(names)
    )


def quality_report(
    model: Model,
    graph: ApproximationGraph,
    state: VariationalState,
    rng: np.random.Generator,
    n_samples: int = DEFAULT_QUALITY_SAMPLES,
    estimator: EstimatorKind = EstimatorKind(),
    natgrad_seed: int | None = None,
    natgrad_samples: int | None = None,
) -> QualityReport:
    """Full quality report: R-squared, gradient norm and variable summaries."""
    from .batch import min_samples

    logp, logq, values = _log_densities(model, graph, state, n_samples, rng)
    r2 = _r2_from_densities(logp, logq)
    var_p = float(np.var(logp, ddof=1))
    var_res = float(np.var(logp - logq, ddof=1))
    norm = None
    if natgrad_seed is not None:
        n = natgrad_samples or 2 * min_samples(graph)
        norm = natgrad_norm(model, graph, state, natgrad_seed, n, estimator)
    return QualityReport(
        r_squared=r2,
        n_samples=n_samples,
        residual_variance=var_res,
        logp_variance=var_p,
        clamped=r2 > 1.0,
        natgrad_norm=norm,
        summaries=_summaries_from_matrix(graph.coord_names, values),
    )
