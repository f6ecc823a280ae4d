"""Batch natural-gradient optimizer with a gradient-only line search.

The natural gradient is evaluated on a fixed random seed and a fixed number
of samples, which makes it a smooth deterministic function f of the
variational state for continuous models. Steps follow s = -f with a step
length found by secant/quadratic interpolation of the directional derivative
a -> s . f(state + a s), accepted under the strong curvature condition or at
the cap while still descending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidConditionalError, LineSearchError, NonFiniteJointError
from .estimators import EstimatorKind, estimate, natural_gradient
from .graph import ApproximationGraph, VariationalState
from .models import Model
from .online import FitResult, _config_echo, try_quality_report

MAX_LINE_TRIALS = 10
# Relative eigenvalue cutoff of the batch solves. Small-sample regressions
# carry no usable information along middling eigendirections either, so the
# batch map truncates more aggressively than the online smoother.
BATCH_EIGENVALUE_FLOOR = 1e-2


def _secant(a: float, da: float, b: float, db: float) -> float:
    """Root of the line through (a, da) and (b, db); midpoint if degenerate."""
    if db == da:
        return 0.5 * (a + b)
    return a - da * (b - a) / (db - da)


def _clamped(x: float, lo: float, hi: float) -> float:
    span = hi - lo
    return min(max(x, lo + 0.1 * span), hi - 0.1 * span)


@dataclass(frozen=True)
class BatchConfig:
    seed_star: int = 12345  # the stream is reset to this seed per evaluation
    n_samples: int | None = None  # None: two-phase 2*n_min then 5*n_min
    c_curv: float = 0.5  # strong curvature constant
    c_mss: float = 100.0  # maximum mean-square step size
    grad_tol: float = 1e-3  # termination threshold on ||f|| / sqrt(K)
    max_outer: int = 200
    estimator: EstimatorKind = field(
        default_factory=lambda: EstimatorKind(pathwise=True)
    )
    # Damped online iterations run first to move the start out of the wild
    # diffuse-prior transient, where small-sample natural gradients are too
    # rough for a line search. Deterministic given seed_star; 0 disables.
    warmup_iters: int = 300

    def __post_init__(self):
        if not 0 < self.c_curv < 1:
            raise ValueError("c_curv must lie in (0, 1)")


def min_samples(graph: ApproximationGraph) -> int:
    """Smallest draw count keeping every block's regression solvable.

    The per-draw C is full rank in the statistic dimension (the conditional
    variance is analytic), so only the feature dimension needs covering:
    max_i J_i draws suffice.
    """
    return max(b.n_features for b in graph.blocks)


def batch_natural_gradient(
    model: Model,
    graph: ApproximationGraph,
    state: VariationalState,
    config: BatchConfig,
    n_samples: int | None = None,
) -> np.ndarray:
    """Natural gradient from a fresh stream at the fixed seed; deterministic in state."""
    n = n_samples if n_samples is not None else (config.n_samples or 2 * min_samples(graph))
    rng = np.random.default_rng(config.seed_star)
    stats = estimate(model, graph, state, rng, n, config.estimator)
    return natural_gradient(
        graph, stats, state, truncate=True, floor=BATCH_EIGENVALUE_FLOOR
    )


def line_search(
    f_eval,
    flat: np.ndarray,
    direction: np.ndarray,
    f0: np.ndarray,
    config: BatchConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Find an acceptable step length along ``direction``.

    Returns (alpha, new flat state, f at the new state). Proposals that make
    the approximation improper temporarily shrink the step cap. After
    ``MAX_LINE_TRIALS`` trials the best one by |directional derivative| is
    accepted; if every trial was improper a LineSearchError is raised.
    """
    s = direction
    ssq = float(s @ s)
    if ssq == 0.0:
        return 0.0, flat, f0
    n_params = len(flat)
    alpha_max = min(1.5, math.sqrt(n_params * config.c_mss / ssq))
    d0 = float(s @ f0)

    alpha = min(1.0, alpha_max)
    lo, d_lo = 0.0, d0  # largest alpha seen with negative derivative
    hi, d_hi = None, None  # smallest alpha seen with positive derivative
    best = None  # (|d|, alpha, flat, f)
    last_invalid = None

    for _ in range(MAX_LINE_TRIALS):
        trial = flat + alpha * s
        try:
            f1 = f_eval(trial)
        except (InvalidConditionalError, NonFiniteJointError) as exc:
            last_invalid = exc
            alpha_max = alpha / 2.0
            alpha = alpha_max
            continue
        d1 = float(s @ f1)
        if best is None or abs(d1) < best[0]:
            best = (abs(d1), alpha, trial, f1)
        at_cap = alpha >= alpha_max * (1.0 - 1e-12)
        if (at_cap and d1 < 0.0) or abs(d1) < config.c_curv * abs(d0):
            return alpha, trial, f1
        # Next proposal: root of the secant of the directional derivative,
        # i.e. the minimizer of the quadratic through the two newest values.
        if d1 < 0.0:
            if hi is not None:
                alpha_next = _secant(alpha, d1, hi, d_hi)
                alpha_next = _clamped(alpha_next, alpha, hi)
            elif d1 > d_lo:
                alpha_next = min(_secant(lo, d_lo, alpha, d1), alpha_max)
            else:
                alpha_next = min(2.0 * alpha, alpha_max)
            lo, d_lo = alpha, d1
        else:
            hi, d_hi = alpha, d1
            alpha_next = _clamped(_secant(lo, d_lo, hi, d_hi), lo, hi)
        alpha = alpha_next
    if best is None:
        block = getattr(last_invalid, "block", "?")
        raise LineSearchError(
            f"no proposal defined a proper distribution (last failing block: "
            f"'{block}')"
        )
    _, alpha, trial, f1 = best
    return alpha, trial, f1


def fit_batch(
    model: Model, graph: ApproximationGraph, config: BatchConfig = BatchConfig()
) -> FitResult:
    """Natural-gradient descent with line search until ||f||/sqrt(K) <= grad_tol.

    With ``n_samples`` unset, optimizes at 2 * min_samples and then finetunes
    the solution at 5 * min_samples.
    """
    n_min = min_samples(graph)
    phases = [config.n_samples] if config.n_samples else [2 * n_min, 5 * n_min]
    if config.warmup_iters > 0:
        from .online import OnlineConfig, warm_start_state

        start = warm_start_state(
            model,
            graph,
            OnlineConfig(
                seed=config.seed_star,
                estimator=replace(config.estimator, pathwise=False),
            ),
            config.warmup_iters,
            np.random.default_rng([config.seed_star, 0x57A2]),
        )
    else:
        start = graph.init_state()
    flat = graph.flatten(start)
    norm_trace: list[float] = []
    alpha_trace: list[float] = []
    failure = None
    conv = False
    sqrt_k = math.sqrt(graph.n_params)

    for n in phases:
        cfg = replace(config, n_samples=n)

        def f_eval(vec, _cfg=cfg):
            return batch_natural_gradient(model, graph, graph.unflatten(vec), _cfg)

        try:
            f = f_eval(flat)
        except (InvalidConditionalError, NonFiniteJointError) as exc:
            failure = f"natural gradient unavailable at the phase start: {exc}"
            break
        conv = False
        while len(norm_trace) < config.max_outer:
            norm = float(np.linalg.norm(f)) / sqrt_k
            norm_trace.append(norm)
            if norm <= config.grad_tol:
                conv = True
                alpha_trace.append(0.0)
                break
            try:
                alpha, flat, f = line_search(f_eval, flat, -f, f, cfg)
            except LineSearchError as exc:
                failure = str(exc)
                alpha_trace.append(0.0)
                break
            alpha_trace.append(alpha)
        if failure:
            break

    state = graph.unflatten(flat)
    quality, quality_failure = try_quality_report(
        model,
        graph,
        state,
        rng=np.random.default_rng([config.seed_star, 0xD1A6]),
        estimator=config.estimator,
    )
    return FitResult(
        method="batch",
        state=state,
        r_squared=quality.r_squared if quality else math.nan,
        quality=quality,
        iterations=len(norm_trace),
        converged=conv and failure is None,
        z_trace=np.array(norm_trace),
        alpha_trace=np.array(alpha_trace),
        seed=config.seed_star,
        config=_config_echo(config),
        failure=failure or quality_failure,
    )
