"""Model interface and the built-in model zoo.

A model packages an unnormalized log joint density over named unknowns,
optional per-block gradients and Hessians, and the specification from which
an approximation graph is built. The zoo contains a conjugate-Gaussian
oracle model and a stochastic volatility model in three equivalent
specifications that induce approximations of increasing quality:

* ``sv-a``: volatilities depend on (mu, phi, sigma2); the three parameters
  stay mutually independent under the approximation.
* ``sv-b``: re-parameterized so the volatilities are centered at zero and
  independent of mu; the likelihood reads N(0, exp(mu + v_t)).
* ``sv-c``: (mu, v) form one joint Gaussian block with a diffuse prior on
  mu, and the sigma2 conditional gains a (1, phi, phi^2) feature basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import special

from .errors import UnsupportedEstimatorError
from .families import LOG_2PI, AffineSupport, Beta, GaussianUni, InvGamma
from .graph import (
    BlockSpec,
    ExpFamilyPrior,
    FeatureBasis,
    FlatLocationPrior,
    ModelSpec,
)
from .sparse_gaussian import SparseGaussian, SparsityPattern

# Parameter priors of the stochastic volatility model:
# (phi + 1)/2 ~ Beta(20, 1.5), sigma2 ~ Inv-Gamma(5, 0.25), mu flat.
SV_PHI_ALPHA = 20.0
SV_PHI_BETA = 1.5
SV_S2_ALPHA = 5.0
SV_S2_BETA = 0.25
# Finite stand-in for the diffuse prior precision on mu in the joint block.
SV_DIFFUSE_PRECISION = 1e-8


@dataclass(frozen=True)
class Model:
    """Unnormalized log joint with optional per-block derivatives."""

    name: str
    spec: ModelSpec
    log_joint: Callable[[dict], float]
    grads: dict[str, Callable] = field(default_factory=dict)
    hessians: dict[str, Callable] = field(default_factory=dict)
    data: np.ndarray | None = None
    aux: dict = field(default_factory=dict)
    # Optional per-block analytic expected-log-likelihood hooks. No zoo model
    # provides them; the field exists so user models can declare theirs.
    analytic_expectations: dict = field(default_factory=dict)

    def has_grad(self, block: str) -> bool:
        return block in self.grads

    def has_hess(self, block: str) -> bool:
        return block in self.hessians

    def grad(self, assignment: dict, block: str):
        if block not in self.grads:
            raise UnsupportedEstimatorError(
                f"model '{self.name}' provides no gradient for block '{block}'"
            )
        return self.grads[block](assignment)

    def hess(self, assignment: dict, block: str):
        if block not in self.hessians:
            raise UnsupportedEstimatorError(
                f"model '{self.name}' provides no Hessian for block '{block}'"
            )
        return self.hessians[block](assignment)


@dataclass(frozen=True)
class SvParams:
    """Generative parameters of the stochastic volatility model."""

    mu: float
    phi: float
    sigma2: float
    n_obs: int

    def __post_init__(self):
        if not abs(self.phi) < 1:
            raise ValueError(f"|phi| must be below 1, got {self.phi}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be nonnegative, got {self.sigma2}")
        if self.n_obs < 2:
            raise ValueError(f"need at least 2 observations, got {self.n_obs}")


def simulate_sv(params: SvParams, rng: np.random.Generator) -> np.ndarray:
    """Draw a return series from the stochastic volatility model.

    v_1 ~ N(mu, sigma2 / (1 - phi^2)), v_{t+1} ~ N(phi v_t + (1-phi) mu,
    sigma2), y_t ~ N(0, exp(v_t)).
    """
    mu, phi, s2, n = params.mu, params.phi, params.sigma2, params.n_obs
    z = rng.standard_normal(n)
    v = np.empty(n)
    v[0] = mu + math.sqrt(s2 / (1.0 - phi * phi)) * z[0]
    sd = math.sqrt(s2)
    for t in range(1, n):
        v[t] = phi * v[t - 1] + (1.0 - phi) * mu + sd * z[t]
    return np.exp(0.5 * v) * rng.standard_normal(n)


# --- AR(1) prior pieces ------------------------------------------------------


@lru_cache(maxsize=64)
def ar1_precision(phi: float, sigma2: float, n: int) -> np.ndarray:
    """Tridiagonal precision of the stationary AR(1) volatility prior.

    Cached per parameter value and returned read-only; an optimizer
    iteration asks for the same matrix several times.
    """
    main = np.full(n, 1.0 + phi * phi)
    main[0] = 1.0
    main[-1] = 1.0
    off = np.full(n - 1, -phi)
    p = np.diag(main) + np.diag(off, 1) + np.diag(off, -1)
    p /= sigma2
    p.setflags(write=False)
    return p


def _ar1_quad(v: np.ndarray, mu: float, phi: float) -> float:
    e1 = v[0] - mu
    e = v[1:] - phi * v[:-1] - (1.0 - phi) * mu
    return float((1.0 - phi * phi) * e1 * e1 + e @ e)


def _ar1_quad_grad_v(v: np.ndarray, mu: float, phi: float) -> np.ndarray:
    e = v[1:] - phi * v[:-1] - (1.0 - phi) * mu
    g = np.zeros_like(v)
    g[0] = 2.0 * (1.0 - phi * phi) * (v[0] - mu)
    g[1:] += 2.0 * e
    g[:-1] -= 2.0 * phi * e
    return g

def _ar1_quad_grad_mu(v: np.ndarray, mu: float, phi: float) -> float:
    e = v[1:] - phi * v[:-1] - (1.0 - phi) * mu
    return float(-2.0 * (1.0 - phi * phi) * (v[0] - mu) - 2.0 * (1.0 - phi) * e.sum())


def _ar1_quad_grad_phi(v: np.ndarray, mu: float, phi: float) -> float:
    e = v[1:] - phi * v[:-1] - (1.0 - phi) * mu
    e1 = v[0] - mu
    return float(-2.0 * phi * e1 * e1 - 2.0 * e @ (v[:-1] - mu))


def _phi_prior_grad(phi: float) -> float:
    u = 0.5 * (phi + 1.0)
    return float(0.5 * (SV_PHI_ALPHA - 1.0) / u - 0.5 * (SV_PHI_BETA - 1.0) / (1.0 - u))


def _s2_prior_grad(s2: float) -> float:
    return float(-(SV_S2_ALPHA + 1.0) / s2 + SV_S2_BETA / s2**2)


def ar1_logpdf(v: np.ndarray, mu: float, phi: float, sigma2: float) -> float:
    n = len(v)
    return (
        -0.5 * n * (LOG_2PI + math.log(sigma2))
        + 0.5 * math.log1p(-phi * phi)
        - 0.5 * _ar1_quad(v, mu, phi) / sigma2
    )


@lru_cache(maxsize=64)
def joint_level_precision(phi: float, sigma2: float, n: int) -> np.ndarray:
    """Precision of (mu, v_1..v_n) jointly, with a diffuse term on mu.

    The AR(1) quadratic form is singular along the all-ones direction
    (mu and every v shifted together); the diffuse precision on mu makes
    the joint proper while leaving it effectively flat. Cached and
    read-only, like :func:`ar1_precision`.
    """
    p = np.zeros((n + 1, n + 1))
    p[1:, 1:] = ar1_precision(phi, sigma2, n) * sigma2
    p[0, 0] = (1.0 - phi * phi) + (n - 1) * (1.0 - phi) ** 2
    border = np.full(n, -((1.0 - phi) ** 2))
    border[0] = -(1.0 - phi)
    border[-1] = -(1.0 - phi)
    p[0, 1:] = border
    p[1:, 0] = border
    p /= sigma2
    p[0, 0] += SV_DIFFUSE_PRECISION
    p.setflags(write=False)
    return p


# --- stochastic volatility models -------------------------------------------


def _phi_prior_logpdf(phi: float) -> float:
    # (phi + 1)/2 ~ Beta(alpha, beta); includes the 1/2 Jacobian.
    a, b = SV_PHI_ALPHA, SV_PHI_BETA
    u = 0.5 * (phi + 1.0)
    return float(
        (a - 1.0) * math.log(u)
        + (b - 1.0) * math.log1p(-u)
        - special.betaln(a, b)
        - math.log(2.0)
    )


def _s2_prior_logpdf(s2: float) -> float:
    a, b = SV_S2_ALPHA, SV_S2_BETA
    return float(
        a * math.log(b) - special.gammaln(a) - (a + 1.0) * math.log(s2) - b / s2
    )


def _sv_guards(phi: float, s2: float) -> bool:
    return abs(phi) < 1.0 and s2 > 0.0 and np.isfinite(phi) and np.isfinite(s2)


def _gaussian_loglik(y: np.ndarray, logvar: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        terms = logvar + y * y * np.exp(-logvar)
    total = -0.5 * float(np.sum(LOG_2PI + terms))
    return total if np.isfinite(total) else -math.inf


def _sv_param_blocks() -> tuple[BlockSpec, BlockSpec]:
    phi_block = BlockSpec(
        "phi",
        ExpFamilyPrior(Beta(), constant=(SV_PHI_ALPHA - 1.0, SV_PHI_BETA - 1.0)),
        transform=AffineSupport(loc=-1.0, scale=2.0),
    )
    s2_block = BlockSpec(
        "sigma2",
        ExpFamilyPrior(InvGamma(), constant=(-SV_S2_ALPHA - 1.0, -SV_S2_BETA)),
    )
    return phi_block, s2_block


def make_sv_model(variant: str, y: np.ndarray) -> Model:
    """Build the stochastic volatility model in specification A, B or C."""
    variant = variant.lower().removeprefix("sv-")
    if variant not in ("a", "b", "c"):
        raise ValueError(f"unknown stochastic volatility variant {variant!r}")
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("observation series is empty")
    n = len(y)
    phi_block, s2_block = _sv_param_blocks()

    if variant in ("a", "b"):
        centered = variant == "b"
        fam_v = SparseGaussian(n, SparsityPattern.tridiagonal(n))

        def v_link(pv, _fam=fam_v):
            mu = 0.0 if centered else pv["mu"]
            p = ar1_precision(pv["phi"], pv["sigma2"], n)
            return _fam.naturals(p @ np.full(n, mu), p)

        v_parents = ("phi", "sigma2") if centered else ("mu", "phi", "sigma2")
        spec = ModelSpec(
            blocks=(
                BlockSpec("mu", FlatLocationPrior()),
                phi_block,
                s2_block,
                BlockSpec("v", ExpFamilyPrior(fam_v, link=v_link), parents=v_parents),
            )
        )

        def log_joint(asg):
            mu, phi, s2 = asg["mu"], asg["phi"], asg["sigma2"]
            v = asg["v"]
            if not _sv_guards(phi, s2):
                return -math.inf
            lp = _phi_prior_logpdf(phi) + _s2_prior_logpdf(s2)
            lp += ar1_logpdf(v, 0.0 if centered else mu, phi, s2)
            lp += _gaussian_loglik(y, mu + v if centered else v)
            return lp

        def grad_v(asg):
            mu, phi, s2, v = asg["mu"], asg["phi"], asg["sigma2"], asg["v"]
            level = 0.0 if centered else mu
            g = -0.5 * _ar1_quad_grad_v(v, level, phi) / s2
            logvar = mu + v if centered else v
            with np.errstate(over="ignore"):
                g += 0.5 * (y * y * np.exp(-logvar) - 1.0)
            return g

        def hess_v(asg):
            mu, phi, s2, v = asg["mu"], asg["phi"], asg["sigma2"], asg["v"]
            logvar = mu + v if centered else v
            with np.errstate(over="ignore"):
                lik = -0.5 * y * y * np.exp(-logvar)
            return -ar1_precision(phi, s2, n) + np.diag(lik)

        if centered:

            def grad_mu(asg):
                logvar = asg["mu"] + asg["v"]
                with np.errstate(over="ignore"):
                    return float(0.5 * np.sum(y * y * np.exp(-logvar) - 1.0))

            def hess_mu(asg):
                logvar = asg["mu"] + asg["v"]
                with np.errstate(over="ignore"):
                    return float(-0.5 * np.sum(y * y * np.exp(-logvar)))

        else:

            def grad_mu(asg):
                mu, phi, s2, v = asg["mu"], asg["phi"], asg["sigma2"], asg["v"]
                return -0.5 * _ar1_quad_grad_mu(v, mu, phi) / s2

            def hess_mu(asg):
                phi, s2 = asg["phi"], asg["sigma2"]
                return -((1.0 - phi * phi) + (n - 1) * (1.0 - phi) ** 2) / s2

        def grad_phi(asg):
            mu, phi, s2, v = asg["mu"], asg["phi"], asg["sigma2"], asg["v"]
            level = 0.0 if centered else mu
            return (
                _phi_prior_grad(phi)
                - phi / (1.0 - phi * phi)
                - 0.5 * _ar1_quad_grad_phi(v, level, phi) / s2
            )

        def grad_s2(asg):
            mu, phi, s2, v = asg["mu"], asg["phi"], asg["sigma2"], asg["v"]
            level = 0.0 if centered else mu
            quad = _ar1_quad(v, level, phi)
            return _s2_prior_grad(s2) - 0.5 * n / s2 + 0.5 * quad / s2**2

        return Model(
            name=f"sv-{variant}",
            spec=spec,
            log_joint=log_joint,
            grads={"v": grad_v, "mu": grad_mu, "phi": grad_phi, "sigma2": grad_s2},
            hessians={"v": hess_v, "mu": hess_mu},
            data=y,
        )

    # variant C: one joint Gaussian block over (mu, v), sigma2 | phi features
    fam_w = SparseGaussian(n + 1, SparsityPattern.bordered_banded(n + 1, 1, [0]))

    def w_link(pv, _fam=fam_w):
        p = joint_level_precision(pv["phi"], pv["sigma2"], n)
        return _fam.naturals(np.zeros(n + 1), p)

    spec = ModelSpec(
        blocks=(
            phi_block,
            BlockSpec(
                "sigma2",
                s2_block.prior,
                parents=("phi",),
                basis=FeatureBasis.polynomial("phi", 2),
            ),
            BlockSpec(
                "mu_v",
                ExpFamilyPrior(fam_w, link=w_link),
                parents=("phi", "sigma2"),
                coord_names=("mu",) + tuple(f"v[{t + 1}]" for t in range(n)),
            ),
        )
    )

    def log_joint(asg):
        phi, s2, w = asg["phi"], asg["sigma2"], asg["mu_v"]
        if not _sv_guards(phi, s2):
            return -math.inf
        mu, v = w[0], w[1:]
        lp = _phi_prior_logpdf(phi) + _s2_prior_logpdf(s2)
        # log det of the joint precision in closed form: the Schur complement
        # of the mu entry is exactly the diffuse precision.
        lp += -0.5 * (n + 1) * LOG_2PI + 0.5 * (
            math.log(SV_DIFFUSE_PRECISION) + math.log1p(-phi * phi) - n * math.log(s2)
        )
        lp += -0.5 * (
            _ar1_quad(v, mu, phi) / s2 + SV_DIFFUSE_PRECISION * mu * mu
        )
        lp += _gaussian_loglik(y, v)
        return lp

    def grad_w(asg):
        phi, s2, w = asg["phi"], asg["sigma2"], asg["mu_v"]
        mu, v = w[0], w[1:]
        g = np.empty(n + 1)
        g[0] = -0.5 * _ar1_quad_grad_mu(v, mu, phi) / s2 - SV_DIFFUSE_PRECISION * mu
        with np.errstate(over="ignore"):
            lik = 0.5 * (y * y * np.exp(-v) - 1.0)
        g[1:] = -0.5 * _ar1_quad_grad_v(v, mu, phi) / s2 + lik
        return g

    def hess_w(asg):
        phi, s2, w = asg["phi"], asg["sigma2"], asg["mu_v"]
        v = w[1:]
        h = -joint_level_precision(phi, s2, n)
        with np.errstate(over="ignore"):
            h[1:, 1:][np.diag_indices(n)] += -0.5 * y * y * np.exp(-v)
        return h

    def grad_phi(asg):
        phi, s2, w = asg["phi"], asg["sigma2"], asg["mu_v"]
        mu, v = w[0], w[1:]
        return (
            _phi_prior_grad(phi)
            - phi / (1.0 - phi * phi)
            - 0.5 * _ar1_quad_grad_phi(v, mu, phi) / s2
        )

    return Model(
        name="sv-c",
        spec=spec,
        log_joint=log_joint,
        grads={"mu_v": grad_w, "phi": grad_phi},
        hessians={"mu_v": hess_w},
        data=y,
    )


# --- conjugate-Gaussian oracle model -----------------------------------------


def make_conjugate_normal(
    prior_mean: float, prior_var: float, obs_var: float, y: np.ndarray
) -> Model:
    """Unknown mean of a known-variance Gaussian, so the posterior is exact."""
    if prior_var <= 0 or obs_var <= 0:
        raise ValueError("prior and observation variances must be positive")
    y = np.asarray(y, dtype=float)
    n = len(y)
    post_var = 1.0 / (1.0 / prior_var + n / obs_var)
    post_mean = post_var * (prior_mean / prior_var + y.sum() / obs_var)

    spec = ModelSpec(
        blocks=(
            BlockSpec(
                "mean",
                ExpFamilyPrior(
                    GaussianUni(),
                    constant=tuple(GaussianUni.from_mean_variance(prior_mean, prior_var)),
                ),
            ),
        )
    )

    def log_joint(asg):
        theta = asg["mean"]
        lp = -0.5 * ((theta - prior_mean) ** 2 / prior_var + LOG_2PI + math.log(prior_var))
        if n:
            lp += -0.5 * float(
                np.sum((y - theta) ** 2) / obs_var + n * (LOG_2PI + math.log(obs_var))
            )
        return float(lp)

    def grad(asg):
        theta = asg["mean"]
        return float(-(theta - prior_mean) / prior_var + np.sum(y - theta) / obs_var)

    def hess(asg):
        return float(-1.0 / prior_var - n / obs_var)

    return Model(
        name="conjugate",
        spec=spec,
        log_joint=log_joint,
        grads={"mean": grad},
        hessians={"mean": hess},
        data=y,
        aux={
            "conjugate": {
                "posterior_mean": post_mean,
                "posterior_var": post_var,
                "prior_mean": prior_mean,
                "prior_var": prior_var,
                "obs_var": obs_var,
            }
        },
    )


def exact_posterior_conjugate(model: Model) -> np.ndarray:
    """Exact Gaussian posterior of a conjugate model, in natural coordinates."""
    info = model.aux.get("conjugate")
    if info is None:
        raise UnsupportedEstimatorError(
            f"model '{model.name}' has no closed-form conjugate posterior"
        )
    return GaussianUni.from_mean_variance(info["posterior_mean"], info["posterior_var"])


# --- observation series files ------------------------------------------------


def save_series(path, y: np.ndarray) -> None:
    """Write a one-column CSV with header ``y``."""
    lines = ["y"] + [repr(float(val)) for val in np.asarray(y, dtype=float)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_series(path) -> np.ndarray:
    """Read a one-column CSV of decimal literals; a leading ``y`` header is optional."""
    values = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            token = line.strip()
            if not token:
                continue
            if i == 0 and token.lower() == "y":
                continue
            values.append(float(token))
    if not values:
        raise ValueError(f"no observations found in {path}")
    return np.array(values)
