"""Stochastic estimators of the per-block regression statistics.

Fitting one block is a linear regression of the unnormalized log posterior
on the block's sufficient statistics, with the prior's (parent-dependent)
natural parameters entering as a known offset. Per joint draw the estimators
accumulate, for block i with feature vector psi and conditional naturals
eta_cond:

* ``sample-cov``      C += psi psi' (x) Var[T | parents]   (analytic),
                      g += psi (x) [ (T - E[T|parents]) (r - rbar)
                                     + Var[T] (eta_cond - etatilde) ],
  where r = log p(x, y) - log q(x) is the log importance weight and
  etatilde is the prior offset. Every term with a closed form is computed
  analytically: centering T by its conditional mean makes a single draw
  unbiased, and the block's own log q_i contribution to the residual is
  replaced by its exact covariance Var[T] eta_cond (so g solves directly
  for offset coefficients and the natural gradient vanishes at the fixed
  point). The baseline rbar plays the role of the regression intercept:
  any value independent of the draw leaves the estimate unbiased while
  removing the variance contributed by the overall level of the log
  weight. Multi-draw estimates center r empirically (with the n-1
  correction); single-draw estimates use a caller-supplied running
  baseline.

* ``gaussian-grad``   same C; g built from the block gradient of
  log p - log q_i via the Gaussian identities Cov(x, h) = Sigma E[grad h]
  and Cov(z_a z_b, h) = (Sigma E[hess h] Sigma)_ab, the latter estimated
  from a single draw as the symmetrized product (Sigma grad)_a z_b, plus
  the same analytic own-block term. Differencing the two gradients makes
  the estimator noise vanish as the approximation approaches the target.
  Derivative terms through blocks further down the hierarchy are dropped.

* ``gaussian-grad-hess``  running averages of (grad log p, hess log p
  restricted to the sparsity pattern, the draw, the prior offset); the
  update assembles h = gbar - Hbar xbar and precision P = -Hbar, which is
  exact for quadratic log posteriors from a single draw.

Non-Gaussian blocks always use ``sample-cov``; gradient estimators require
a constant-only feature basis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from scipy import special

from .errors import ConditioningError, NonFiniteJointError, UnsupportedEstimatorError
from .families import Beta, GaussianUni, InvGamma
from .graph import ApproximationGraph, Block, VariationalState
from .models import Model
from .sparse_gaussian import SparseGaussian

ESTIMATOR_KINDS = ("sample-cov", "gaussian-grad", "gaussian-grad-hess")

# Ridge strength on shrunk feature coefficients, relative to mean(diag C).
RIDGE_FRACTION = 0.01
# Eigenvalue floor of the regression matrix, relative to its largest
# eigenvalue. Nearly collinear sufficient statistics (concentrated Beta or
# inverse-Gamma conditionals) make C numerically rank-deficient; flooring
# caps the noise amplification along quasi-flat directions. The accompanying
# proximal shift of g keeps the solve's root exactly where C eta = g, so
# fixed points and natural-gradient zeros are unaffected.
EIGENVALUE_FLOOR = 1e-4
# Jitter escalation for symmetric solves: start at JITTER_START * trace/n,
# multiply by 10, at most JITTER_TRIES attempts.
JITTER_START = 1e-10
JITTER_TRIES = 3


@dataclass(frozen=True)
class EstimatorKind:
    """Which statistics estimator to use, plus per-path toggles.

    ``pathwise`` opts non-Gaussian continuous blocks into the first-
    derivative estimator through the inverse-CDF sampler. Its per-draw
    values are heavy-tailed away from the optimum, so the stochastic online
    optimizer leaves it off; the fixed-seed batch optimizer turns it on,
    where its smoothness and vanishing noise at the fixed point make the
    natural-gradient map contractive.
    """

    kind: str = "gaussian-grad-hess"
    preconditioned: bool = False
    pathwise: bool = False

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")


def _solve_spd(a: np.ndarray, b: np.ndarray, block: str) -> np.ndarray:
    """Symmetric solve with jitter escalation before giving up."""
    jitter = 0.0
    base = JITTER_START * np.trace(a) / len(a)
    for attempt in range(JITTER_TRIES + 1):
        try:
            sol = np.linalg.solve(a + jitter * np.eye(len(a)), b)
            if np.all(np.isfinite(sol)):
                return sol
        except np.linalg.LinAlgError:
            pass
        jitter = base * 10.0**attempt
    raise ConditioningError(block)


@dataclass
class MatrixStats:
    """Regression pair (C, g) for one block, flattened over features."""

    c: np.ndarray
    g: np.ndarray

    def lincomb(self, a: float, other: "MatrixStats", b: float) -> "MatrixStats":
        return MatrixStats(a * self.c + b * other.c, a * self.g + b * other.g)

    def scale(self, a: float) -> "MatrixStats":
        return MatrixStats(a * self.c, a * self.g)

    def solve(
        self,
        block: Block,
        current: np.ndarray | None = None,
        truncate: bool = False,
        floor: float | None = None,
    ) -> np.ndarray:
        """Solve for the proposed coefficients.

        Eigendirections of C below the relative floor carry no statistical
        information at working precision. With ``truncate`` and an anchor
        they are pinned to the anchor exactly (batch root-finding); without
        it they creep toward the unregularized solution at rate eigenvalue /
        floor (online smoothing absorbs the residual noise). Either way the
        solve's root stays exactly where C eta = g.
        """
        floor = EIGENVALUE_FLOOR if floor is None else floor
        c, g = self.c, self.g
        shrunk = np.repeat(np.asarray(block.basis.shrink, dtype=bool), block.k)
        if shrunk.any():
            lam = RIDGE_FRACTION * float(np.mean(np.diag(c)))
            c = c + lam * np.diag(shrunk.astype(float))
        if np.allclose(c, c.T, rtol=1e-10, atol=0.0):
            try:
                eigvals, eigvecs = np.linalg.eigh(c)
            except np.linalg.LinAlgError:
                eigvals = None
            if eigvals is not None and eigvals[-1] > 0:
                weak = eigvals < floor * eigvals[-1]
                if truncate and current is not None and weak.any():
                    rot = eigvecs.T @ g
                    anchor = eigvecs.T @ current.ravel()
                    sol = eigvecs @ np.where(
                        weak, anchor, rot / np.where(weak, 1.0, eigvals)
                    )
                else:
                    floored = np.maximum(eigvals, floor * eigvals[-1])
                    if current is not None and weak.any():
                        lift = (floored - eigvals) * (eigvecs.T @ current.ravel())
                        g = g + eigvecs @ lift
                    sol = eigvecs @ ((eigvecs.T @ g) / floored)
                if np.all(np.isfinite(sol)):
                    return sol.reshape(block.n_features, block.k)
        # Preconditioned (non-symmetric) or degenerate systems.
        return _solve_spd(c, g, block.name).reshape(block.n_features, block.k)


@dataclass
class GradientStats:
    """Weighted sums backing the gradient+Hessian Gaussian update.

    The assembled update is bilinear in the averages, so a total weight is
    carried and divided out at solve time; linear combinations of these
    statistics then behave like weighted averages.
    """

    gbar: np.ndarray  # weighted sum of grad log p w.r.t. the block
    hvals: np.ndarray  # weighted sum of hess log p on the sparsity pattern
    xbar: np.ndarray  # weighted sum of the draw
    prior_bar: np.ndarray  # weighted sum of prior natural parameters
    weight: float = 1.0

    def lincomb(self, a: float, other: "GradientStats", b: float) -> "GradientStats":
        return GradientStats(
            a * self.gbar + b * other.gbar,
            a * self.hvals + b * other.hvals,
            a * self.xbar + b * other.xbar,
            a * self.prior_bar + b * other.prior_bar,
            a * self.weight + b * other.weight,
        )

    def scale(self, a: float) -> "GradientStats":
        return GradientStats(
            a * self.gbar, a * self.hvals, a * self.xbar, a * self.prior_bar,
            a * self.weight,
        )

    def solve(
        self,
        block: Block,
        current: np.ndarray | None = None,
        truncate: bool = False,
        floor: float | None = None,
    ) -> np.ndarray:
        w = self.weight
        gbar, hvals, xbar = self.gbar / w, self.hvals / w, self.xbar / w
        fam = block.family
        if isinstance(fam, GaussianUni):
            h = gbar[0] - hvals[0] * xbar[0]
            eta_total = np.array([h, 0.5 * hvals[0]])
        else:
            hmat = fam.pattern.dense_from_values(hvals)
            h = gbar - hmat @ xbar
            off = fam.pattern.rows != fam.pattern.cols
            q = np.where(off, hvals, 0.5 * hvals)
            eta_total = np.concatenate([h, q])
        return (eta_total - self.prior_bar / w).reshape(1, block.k)


@dataclass
class RegressionStats:
    """Per-block statistics; supports the linear combinations the optimizers need."""

    blocks: dict[str, MatrixStats | GradientStats] = field(default_factory=dict)

    def lincomb(self, a: float, other: "RegressionStats", b: float) -> "RegressionStats":
        return RegressionStats(
            {name: s.lincomb(a, other.blocks[name], b) for name, s in self.blocks.items()}
        )

    def scale(self, a: float) -> "RegressionStats":
        return RegressionStats({name: s.scale(a) for name, s in self.blocks.items()})

    @staticmethod
    def total(items) -> "RegressionStats":
        items = list(items)
        acc = items[0]
        for item in items[1:]:
            acc = acc.lincomb(1.0, item, 1.0)
        return acc

    def solve(
        self,
        graph: ApproximationGraph,
        state: VariationalState | None = None,
        truncate: bool = False,
        floor: float | None = None,
    ) -> VariationalState:
        """Per-block solve; ``state`` anchors the proximal eigenvalue floor."""
        return VariationalState(
            {
                b.name: self.blocks[b.name].solve(
                    b, None if state is None else state[b.name], truncate, floor
                )
                for b in graph.blocks
            }
        )


def _resolve_kind(kind: EstimatorKind, block: Block, model: Model) -> str:
    if kind.kind == "sample-cov":
        return "sample-cov"
    if isinstance(block.family, (GaussianUni, SparseGaussian)):
        if block.n_features != 1:
            raise UnsupportedEstimatorError(
                f"gradient estimators need a constant-only basis; block "
                f"'{block.name}' has {block.n_features} features"
            )
        if not model.has_grad(block.name):
            raise UnsupportedEstimatorError(
                f"estimator '{kind.kind}' needs a gradient for block '{block.name}'"
            )
        if kind.kind == "gaussian-grad-hess":
            if not model.has_hess(block.name):
                raise UnsupportedEstimatorError(
                    f"estimator 'gaussian-grad-hess' needs a Hessian for block "
                    f"'{block.name}'"
                )
            return "gaussian-grad-hess"
        return "gaussian-grad"
    if (
        kind.pathwise
        and isinstance(block.family, (Beta, InvGamma))
        and block.n_features == 1
        and model.has_grad(block.name)
    ):
        # First-derivative pathwise estimator through the inverse-CDF
        # sampler; low-dimensional blocks high in the hierarchy do not
        # benefit from second derivatives.
        return "pathwise-grad"
    return "sample-cov"


def _zero_stats(
    graph: ApproximationGraph, model: Model, kind: EstimatorKind
) -> tuple[RegressionStats, dict[str, str]]:
    blocks: dict[str, MatrixStats | GradientStats] = {}
    resolved: dict[str, str] = {}
    for b in graph.blocks:
        resolved[b.name] = _resolve_kind(kind, b, model)
        if resolved[b.name] == "gaussian-grad-hess":
            d = b.dim
            n_pairs = b.family.pattern.n_pairs if isinstance(b.family, SparseGaussian) else 1
            blocks[b.name] = GradientStats(
                np.zeros(d), np.zeros(n_pairs), np.zeros(d), np.zeros(b.k), 0.0
            )
        else:
            n = b.n_coef
            blocks[b.name] = MatrixStats(np.zeros((n, n)), np.zeros(n))
    return RegressionStats(blocks), resolved


def _quantile_path(block: Block, eta: np.ndarray, u: float) -> np.ndarray:
    """d(draw)/d(eta) at fixed underlying uniform, in internal coordinates.

    Implicit differentiation of the inverse-CDF sampler: the underlying
    uniform is recovered from the draw, and the quantile is re-evaluated at
    nudged parameters. Scale parameters have exact derivatives.
    """
    fam = block.family
    tiny = np.finfo(float).tiny
    if isinstance(fam, Beta):
        a, b = fam.shape_params(eta)
        w = float(np.clip(special.betainc(a, b, u), tiny, 1.0 - 1e-16))
        da = 1e-4 * max(1.0, a)
        db = 1e-4 * max(1.0, b)
        dua = (special.betaincinv(a + da, b, w) - special.betaincinv(a - da, b, w)) / (2 * da)
        dub = (special.betaincinv(a, b + db, w) - special.betaincinv(a, b - db, w)) / (2 * db)
        return np.array([dua, dub])  # eta = (a - 1, b - 1)
    if isinstance(fam, InvGamma):
        a, b = fam.shape_rate(eta)
        g = b / u  # the underlying gamma draw, rate-free
        w = float(np.clip(special.gammainc(a, g), tiny, 1.0 - 1e-16))
        da = 1e-4 * max(1.0, a)
        dga = (special.gammaincinv(a + da, w) - special.gammaincinv(a - da, w)) / (2 * da)
        dxa = -(b / g**2) * dga  # x = b / g
        return np.array([-dxa, -(u / b)])  # eta = (-a - 1, -b)
    raise UnsupportedEstimatorError(
        f"no pathwise derivative for family {fam.name}"
    )


def _stat_gradient(block: Block, u: float) -> np.ndarray:
    """dT/du of the sufficient statistics, in internal coordinates."""
    if isinstance(block.family, Beta):
        return np.array([1.0 / u, -1.0 / (1.0 - u)])
    return np.array([1.0 / u, -1.0 / u**2])  # inverse-Gamma


def _accumulate_draw(acc, pending, resolved, graph, model, state, rng):
    """One joint draw: accumulate residual-free statistics, defer the rest."""
    assignment, draws = graph.ancestral_pass(state, rng)
    logp = model.log_joint(assignment)
    if not np.isfinite(logp):
        raise NonFiniteJointError(
            f"log joint is {logp} at a draw from the current approximation"
        )
    logq = sum(d.log_density for d in draws.values())
    rvalues: dict[str, float] = {}
    for b in graph.blocks:
        d = draws[b.name]
        stats = acc.blocks[b.name]
        path = resolved[b.name]
        if path == "gaussian-grad-hess":
            grad = np.atleast_1d(np.asarray(model.grad(assignment, b.name), dtype=float))
            hess = model.hess(assignment, b.name)
            if isinstance(b.family, SparseGaussian):
                hvals = b.family.pattern.values_from_dense(np.asarray(hess))
            else:
                hvals = np.atleast_1d(np.asarray(hess, dtype=float))
            stats.gbar += grad
            stats.hvals += hvals
            stats.xbar += np.atleast_1d(np.asarray(d.value, dtype=float))
            stats.prior_bar += d.prior_naturals
            stats.weight += 1.0
            continue

        psi = d.features
        var_t = b.family.conditional_variance(d.eta)
        stats.c += np.kron(np.outer(psi, psi), var_t)
        own = var_t @ (d.eta - d.prior_naturals)
        if path == "sample-cov":
            t_centered = b.suff_stats(d.value) - b.family.mean_parameters(d.eta)
            stats.g += np.kron(psi, own)
            pending[b.name].append(np.kron(psi, t_centered))
            rvalues[b.name] = logp - logq
        elif path == "pathwise-grad":
            u = float(b.to_internal(d.value))
            dx_du = b.transform.scale if b.transform else 1.0
            geff = float(model.grad(assignment, b.name)) * dx_du - float(
                _stat_gradient(b, u) @ d.eta
            )
            cov_hat = geff * _quantile_path(b, d.eta, u)
            stats.g += np.kron(psi, cov_hat + own)
        else:  # gaussian-grad
            grad = model.grad(assignment, b.name)
            if isinstance(b.family, GaussianUni):
                m, v = b.family.mean_variance(d.eta)
                x = float(d.value)
                geff = float(grad) - (d.eta[0] + 2.0 * d.eta[1] * x)
                sg = v * geff
                cov_hat = np.array([sg, 2.0 * m * sg + sg * (x - m)])
            else:
                fam = b.family
                m, sigma = fam.mean_and_cov(d.eta)
                x = np.asarray(d.value, dtype=float)
                h_nat, _ = fam.split(d.eta)
                geff = np.asarray(grad, dtype=float) - (h_nat - fam.precision(d.eta) @ x)
                sg = sigma @ geff
                z = x - m
                a_i, b_i = fam.pattern.rows, fam.pattern.cols
                quad = (
                    m[a_i] * sg[b_i]
                    + m[b_i] * sg[a_i]
                    + 0.5 * (sg[a_i] * z[b_i] + sg[b_i] * z[a_i])
                )
                cov_hat = np.concatenate([sg, quad])
            stats.g += np.kron(psi, cov_hat + own)
    return assignment, rvalues


def _finish(acc, pending, rlist, n_draws, baselines):
    """Average the accumulators and fold in the centered residual terms."""
    out = acc.scale(1.0 / n_draws)
    if not pending:
        return out
    rs = np.array(rlist)
    for name, vecs in pending.items():
        stats = out.blocks[name]
        if n_draws == 1:
            baseline = (baselines or {}).get(name, 0.0)
            stats.g = stats.g + vecs[0] * (rs[0] - baseline)
        else:
            centered = rs - rs.mean()
            stats.g = stats.g + centered @ np.array(vecs) / (n_draws - 1)
    return out


def estimate(
    model: Model,
    graph: ApproximationGraph,
    state: VariationalState,
    rng: np.random.Generator,
    n_draws: int,
    kind: EstimatorKind = EstimatorKind(),
    baselines: dict[str, float] | None = None,
) -> RegressionStats:
    """Average the per-draw statistics over ``n_draws`` joint samples."""
    return estimate_with_baselines(model, graph, state, rng, n_draws, kind, baselines)[0]


def estimate_with_baselines(
    model: Model,
    graph: ApproximationGraph,
    state: VariationalState,
    rng: np.random.Generator,
    n_draws: int,
    kind: EstimatorKind = EstimatorKind(),
    baselines: dict[str, float] | None = None,
) -> tuple[RegressionStats, dict[str, float]]:
    """Like :func:`estimate`, also returning the mean residual per block."""
    if n_draws < 1:
        raise ValueError("need at least one draw")
    acc, resolved = _zero_stats(graph, model, kind)
    pending: dict[str, list] = {n: [] for n, p in resolved.items() if p == "sample-cov"}
    rlist: list[float] = []
    rsums = {n: 0.0 for n in pending}
    overflow_budget = max(50, n_draws)
    drawn = 0
    while drawn < n_draws:
        try:
            _, rvalues = _accumulate_draw(
                acc, pending, resolved, graph, model, state, rng
            )
        except NonFiniteJointError:
            # A tail draw overflowed the log joint; redraw rather than
            # poisoning the batch. Deterministic given the stream.
            overflow_budget -= 1
            if overflow_budget <= 0:
                raise
            continue
        drawn += 1
        if rvalues:
            rlist.append(next(iter(rvalues.values())))
        for name, r in rvalues.items():
            rsums[name] += r
    stats = _finish(acc, pending, rlist, n_draws, baselines)
    return stats, {n: s / n_draws for n, s in rsums.items()}


def single_draw(
    model: Model,
    graph: ApproximationGraph,
    state: VariationalState,
    rng: np.random.Generator,
    kind: EstimatorKind = EstimatorKind(),
    baselines: dict[str, float] | None = None,
) -> tuple[RegressionStats, dict, dict[str, float]]:
    """One-draw statistics plus the assignment and per-block residuals."""
    acc, resolved = _zero_stats(graph, model, kind)
    pending: dict[str, list] = {n: [] for n, p in resolved.items() if p == "sample-cov"}
    assignment, rvalues = _accumulate_draw(
        acc, pending, resolved, graph, model, state, rng
    )
    rlist = [next(iter(rvalues.values()))] if rvalues else []
    return _finish(acc, pending, rlist, 1, baselines), assignment, rvalues


def estimate_sample_cov(model, graph, state, rng, n_draws) -> RegressionStats:
    return estimate(model, graph, state, rng, n_draws, EstimatorKind("sample-cov"))


def estimate_gaussian_grad(
    model, graph, state, rng, n_draws, use_hessian: bool
) -> RegressionStats:
    kind = EstimatorKind("gaussian-grad-hess" if use_hessian else "gaussian-grad")
    return estimate(model, graph, state, rng, n_draws, kind)


def precondition(
    stats: RegressionStats, graph: ApproximationGraph, state: VariationalState
) -> RegressionStats:
    """Rotate (C, g) by the inverse conditional variance on top-level blocks.

    The rotated expected C is the identity, which is the best conditioning
    the linear system can have. The fixed point C^{-1} g is unchanged.
    Blocks with parents (and gradient-form statistics) pass through
    untouched, as the rotation matrix is only computable at the top level.
    """
    out: dict[str, MatrixStats | GradientStats] = {}
    for b in graph.blocks:
        s = stats.blocks[b.name]
        if b.parents or not isinstance(s, MatrixStats):
            out[b.name] = s
            continue
        eta = b.conditional_naturals({}, state[b.name])
        var_t = b.family.conditional_variance(eta)
        kron_v = np.kron(np.eye(b.n_features), var_t)
        try:
            out[b.name] = MatrixStats(
                np.linalg.solve(kron_v, s.c), np.linalg.solve(kron_v, s.g)
            )
        except np.linalg.LinAlgError:
            warnings.warn(
                f"singular conditional variance for block '{b.name}'; "
                "leaving its statistics unrotated",
                stacklevel=2,
            )
            out[b.name] = s
    return RegressionStats(out)


def natural_gradient(
    graph: ApproximationGraph,
    stats: RegressionStats,
    state: VariationalState,
    truncate: bool = False,
    floor: float | None = None,
) -> np.ndarray:
    """Flat vector eta - solve(C, g) per block; zero exactly at the fixed point."""
    proposed = stats.solve(graph, state, truncate, floor)
    return graph.flatten(state) - graph.flatten(proposed)
