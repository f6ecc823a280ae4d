"""Online stochastic optimizer with damping, convergence check and averaging.

Each iteration draws one joint sample, refreshes smoothed regression
statistics with the declining weight w_t = 1 / sqrt(10 + t), solves for a
proposed state, and applies a damped move limited by the maximum mean-square
step size. Convergence is declared when a running average of the per-
parameter squared proposal distance drops below tolerance; the run then
continues for a trailing window whose raw statistics are summed and solved
once more to produce the reported state.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    InvalidConditionalError,
    NonFiniteJointError,
    UndefinedQualityError,
)
from .estimators import (
    EIGENVALUE_FLOOR,
    EstimatorKind,
    RegressionStats,
    estimate_with_baselines,
    single_draw,
)
from .graph import ApproximationGraph, VariationalState
from .models import Model

# Damped proposals are halved at most this many times before the iteration
# becomes a no-op.
MAX_BACKOFFS = 20
# The eigenvalue floor of the per-iteration solves anneals from this value
# down to the estimator default at rate t**-FLOOR_ANNEAL_POWER: early
# iterations are noise-dominated and weakly identified directions would
# otherwise random-walk into degenerate corners before the smoothed
# statistics carry signal.
FLOOR_ANNEAL = 0.1
FLOOR_ANNEAL_POWER = 1.0


@dataclass(frozen=True)
class OnlineConfig:
    c_mss: float = 10.0  # maximum mean-square step size
    c_tol: float = 1e-4  # convergence tolerance on the running average z_t
    n_avg: int = 50  # trailing-window length for final averaging
    max_iters: int = 50_000
    seed: int = 0
    estimator: EstimatorKind = field(default_factory=EstimatorKind)
    z_window: int = 20  # running-average span of z_t
    burnin_draws: int = 5  # draws initializing the smoothed statistics

    def __post_init__(self):
        if self.c_mss <= 0 or self.c_tol <= 0:
            raise ValueError("c_mss and c_tol must be positive")
        if self.n_avg < 2:
            raise ValueError("n_avg must be at least 2")


@dataclass
class OnlineState:
    """Mutable per-run state of the online optimizer."""

    t: int
    stats: RegressionStats  # smoothed statistics C_t, g_t
    state: VariationalState
    z_values: deque  # last z_window values of (1/K) sum d'd
    ring: deque  # last n_avg raw per-iteration statistics
    baselines: dict = field(default_factory=dict)  # smoothed residual levels
    z_trace: list[float] = field(default_factory=list)
    alpha_trace: list[float] = field(default_factory=list)

    @property
    def z(self) -> float:
        return float(np.mean(self.z_values)) if self.z_values else math.inf


@dataclass
class FitResult:
    """Outcome of one optimizer run."""

    method: str
    state: VariationalState
    r_squared: float
    quality: object  # QualityReport
    iterations: int
    converged: bool
    z_trace: np.ndarray
    alpha_trace: np.ndarray
    seed: int
    config: dict
    failure: str | None = None


def step_size(t: int) -> float:
    """Declining stochastic-approximation weight 1 / sqrt(10 + t)."""
    if t < 1:
        raise ValueError("iterations count from 1")
    return 1.0 / math.sqrt(10.0 + t)


def damping_alpha(
    proposed: np.ndarray, current: np.ndarray, c_mss: float, n_params: int
) -> float:
    """Step fraction keeping the mean-square move at most c_mss."""
    d = proposed - current
    ssq = float(d @ d)
    if ssq == 0.0:
        return 1.0
    return min(1.0, math.sqrt(c_mss * n_params / ssq))


def step(
    s: OnlineState,
    model: Model,
    graph: ApproximationGraph,
    config: OnlineConfig,
    rng: np.random.Generator,
) -> OnlineState:
    """Advance the optimizer by one iteration; never raises on bad proposals."""
    s.t += 1
    try:
        raw, probe, residuals = single_draw(
            model, graph, s.state, rng, config.estimator, s.baselines
        )
    except (InvalidConditionalError, NonFiniteJointError):
        # The current state went invalid at freshly drawn parent values, or
        # a tail draw overflowed the log joint; record a no-op iteration
        # rather than aborting the run or poisoning the statistics.
        s.z_trace.append(s.z)
        s.alpha_trace.append(0.0)
        return s
    w = step_size(s.t)
    s.stats = s.stats.lincomb(1.0 - w, raw, w)
    for name, r in residuals.items():
        prev = s.baselines.get(name, r)
        s.baselines[name] = (1.0 - w) * prev + w * r
    s.ring.append(raw)

    floor = max(EIGENVALUE_FLOOR, FLOOR_ANNEAL * s.t**-FLOOR_ANNEAL_POWER)
    proposed = s.stats.solve(graph, s.state, floor=floor)
    cur_flat = graph.flatten(s.state)
    prop_flat = graph.flatten(proposed)
    d = prop_flat - cur_flat
    s.z_values.append(float(d @ d) / graph.n_params)

    alpha = damping_alpha(prop_flat, cur_flat, config.c_mss, graph.n_params)
    for _ in range(MAX_BACKOFFS + 1):
        candidate = graph.unflatten(cur_flat + alpha * d)
        if graph.is_state_valid_at(candidate, probe):
            s.state = candidate
            break
        alpha *= 0.5
    else:
        alpha = 0.0
    s.z_trace.append(s.z)
    s.alpha_trace.append(alpha)
    return s


def converged(s: OnlineState, config: OnlineConfig) -> bool:
    """True once the z_t running average is filled and below tolerance."""
    return len(s.z_values) >= config.z_window and s.z <= config.c_tol


def finalize_average(
    ring, graph: ApproximationGraph, anchor: VariationalState | None = None
) -> VariationalState:
    """Solve the summed raw statistics of the trailing window.

    Sums rather than means: the solve is invariant to a common scaling of
    (C, g), so normalization is immaterial. ``anchor`` (typically the last
    iterate) centers the proximal eigenvalue floor of the solve; a block
    whose averaged solve is improper falls back to its anchor coefficients,
    which passed validity checks throughout the run.
    """
    total = RegressionStats.total(list(ring))
    final = total.solve(graph, anchor)
    if anchor is not None:
        probe = graph.typical_values(anchor)
        for b in graph.blocks:
            pv = {p: probe[p] for p in b.parents}
            try:
                b.conditional_naturals(pv, final[b.name])
            except InvalidConditionalError:
                final.coefs[b.name] = anchor[b.name].copy()
    return final


def warm_start_state(
    model: Model,
    graph: ApproximationGraph,
    config: OnlineConfig,
    n_iters: int,
    rng: np.random.Generator,
) -> VariationalState:
    """Run a fixed number of damped online iterations, returning the iterate.

    Used to stabilize optimizers that need a sane starting point (the damped
    online updates tolerate the wild diffuse-prior transient).
    """
    state = graph.init_state()
    burn, baselines = estimate_with_baselines(
        model, graph, state, rng, config.burnin_draws, config.estimator
    )
    s = OnlineState(
        t=0,
        stats=burn,
        state=state,
        z_values=deque(maxlen=config.z_window),
        ring=deque(maxlen=config.n_avg),
        baselines=baselines,
    )
    for _ in range(n_iters):
        step(s, model, graph, config, rng)
    return s.state


def fit_online(
    model: Model, graph: ApproximationGraph, config: OnlineConfig = OnlineConfig()
) -> FitResult:
    """Run the online optimizer to convergence plus a trailing window.

    Deterministic given the configuration: the entire trajectory, the final
    state and the quality report are functions of (model, graph, config).
    """
    rng = np.random.default_rng(config.seed)
    state = graph.init_state()
    burn, baselines = estimate_with_baselines(
        model, graph, state, rng, config.burnin_draws, config.estimator
    )
    s = OnlineState(
        t=0,
        stats=burn,
        state=state,
        z_values=deque(maxlen=config.z_window),
        ring=deque(maxlen=config.n_avg),
        baselines=baselines,
    )

    tail = None  # iterations remaining after the convergence check fires
    converged_at = None
    while s.t < config.max_iters:
        step(s, model, graph, config, rng)
        if tail is None and converged(s, config):
            converged_at = s.t
            tail = config.n_avg
        elif tail is not None:
            tail -= 1
            if tail <= 0:
                break

    final_state = finalize_average(s.ring, graph, s.state)
    quality, failure = try_quality_report(
        model,
        graph,
        final_state,
        rng=np.random.default_rng([config.seed, 0xD1A6]),
        estimator=config.estimator,
    )
    return FitResult(
        method="online",
        state=final_state,
        r_squared=quality.r_squared if quality else math.nan,
        quality=quality,
        iterations=s.t,
        converged=converged_at is not None,
        z_trace=np.array(s.z_trace),
        alpha_trace=np.array(s.alpha_trace),
        seed=config.seed,
        config=_config_echo(config),
        failure=failure,
    )


def try_quality_report(model, graph, state, rng, estimator):
    """Quality report, or a failure note when the state cannot be assessed."""
    from .diagnostics import quality_report

    try:
        return quality_report(model, graph, state, rng=rng, estimator=estimator), None
    except (InvalidConditionalError, NonFiniteJointError, UndefinedQualityError) as exc:
        return None, f"quality report unavailable: {exc}"


def _config_echo(config) -> dict:
    echo = asdict(config)
    for key, value in echo.items():
        if isinstance(value, dict) and set(value) == {"kind", "preconditioned"}:
            echo[key] = value["kind"] + (":preconditioned" if value["preconditioned"] else "")
    return echo
