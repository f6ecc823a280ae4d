"""Exponential-family toolkit.

Each family fixes a sufficient-statistic basis once and for all, so natural
parameters, moments and regression statistics are comparable across runs:

* ``GaussianUni``:  T(x) = (x, x^2),        eta = (eta1, eta2), eta2 < 0.
* ``SparseGaussian``: T(x) = (x_j ; x_a x_b for (a, b) in the declared
  sparsity pattern, a <= b); see :mod:`hiervb.sparse_gaussian`.
* ``InvGamma``:     T(x) = (log x, 1/x),    eta = (-alpha - 1, -beta).
* ``Beta``:         T(x) = (log x, log(1-x)), eta = (alpha - 1, beta - 1).

All densities use base measure 1 on their support, so
log q(x) = T(x) . eta - log_normalizer(eta) is exactly normalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidParametersError, SupportError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class AffineSupport:
    """Affine change of variables x = loc + scale * u.

    Lets a family defined on a canonical support (e.g. Beta on (0, 1)) model a
    variable on a shifted/stretched interval. Sufficient statistics and
    natural parameters live in u-space; log densities in x-space pick up the
    constant Jacobian ``-log(scale)``.
    """

    loc: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def to_internal(self, x: float) -> float:
        return (x - self.loc) / self.scale

    def from_internal(self, u: float) -> float:
        return self.loc + self.scale * u

    @property
    def log_jacobian(self) -> float:
        return -math.log(self.scale)


class Family:
    """Shared validity plumbing; concrete families implement the calculus."""

    name: str = ""
    k: int = 0

    def is_valid(self, eta: np.ndarray) -> bool:
        raise NotImplementedError

    def require_valid(self, eta: np.ndarray) -> None:
        if not self.is_valid(eta):
            raise InvalidParametersError(
                f"{self.name} natural parameters {np.asarray(eta)} do not define "
                "a proper distribution"
            )

    def in_support(self, x) -> bool:
        raise NotImplementedError

    def require_support(self, x) -> None:
        if not self.in_support(x):
            raise SupportError(f"{x!r} is outside the support of {self.name}")

    def sufficient_statistics(self, x) -> np.ndarray:
        raise NotImplementedError

    def log_normalizer(self, eta: np.ndarray) -> float:
        raise NotImplementedError

    def mean_parameters(self, eta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def conditional_variance(self, eta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample(self, eta: np.ndarray, rng: np.random.Generator):
        raise NotImplementedError

    def typical_value(self, eta: np.ndarray):
        """A deterministic representative point (the mean where finite)."""
        raise NotImplementedError

    def __repr__(self):  # families are stateless singletons apart from shape
        return f"{type(self).__name__}()"


class GaussianUni(Family):
    """Univariate Gaussian with T(x) = (x, x^2)."""

    name = "gaussian"
    k = 2

    def is_valid(self, eta):
        eta = np.asarray(eta, dtype=float)
        return eta.shape == (2,) and bool(np.all(np.isfinite(eta))) and eta[1] < 0

    def in_support(self, x):
        return np.isfinite(x)

    def mean_variance(self, eta) -> tuple[float, float]:
        self.require_valid(eta)
        v = -0.5 / eta[1]
        return float(eta[0] * v), float(v)

    @staticmethod
    def from_mean_variance(mean: float, variance: float) -> np.ndarray:
        if not variance > 0:
            raise ValueError(f"variance must be positive, got {variance}")
        return np.array([mean / variance, -0.5 / variance])

    def sufficient_statistics(self, x):
        self.require_support(x)
        return np.array([x, x * x], dtype=float)

    def log_normalizer(self, eta):
        m, v = self.mean_variance(eta)
        return 0.5 * m * m / v + 0.5 * math.log(2.0 * math.pi * v)

    def mean_parameters(self, eta):
        m, v = self.mean_variance(eta)
        return np.array([m, v + m * m])

    def conditional_variance(self, eta):
        m, v = self.mean_variance(eta)
        return np.array([[v, 2.0 * m * v], [2.0 * m * v, 2.0 * v * v + 4.0 * m * m * v]])

    def sample(self, eta, rng):
        m, v = self.mean_variance(eta)
        return m + math.sqrt(v) * rng.standard_normal()

    def typical_value(self, eta):
        return self.mean_variance(eta)[0]


class InvGamma(Family):
    """Inverse-Gamma with T(x) = (log x, 1/x) on x > 0."""

    name = "inv-gamma"
    k = 2

    def is_valid(self, eta):
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (2,) or not np.all(np.isfinite(eta)):
            return False
        alpha, beta = -eta[0] - 1.0, -eta[1]
        return alpha > 0 and beta > 0

    def in_support(self, x):
        return np.isfinite(x) and x > 0

    def shape_rate(self, eta) -> tuple[float, float]:
        self.require_valid(eta)
        return float(-eta[0] - 1.0), float(-eta[1])

    @staticmethod
    def from_shape_rate(alpha: float, beta: float) -> np.ndarray:
        if not (alpha > 0 and beta > 0):
            raise ValueError(f"shape and rate must be positive, got {alpha}, {beta}")
        return np.array([-alpha - 1.0, -beta])

    def sufficient_statistics(self, x):
        self.require_support(x)
        return np.array([math.log(x), 1.0 / x])

    def log_normalizer(self, eta):
        alpha, beta = self.shape_rate(eta)
        return float(special.gammaln(alpha) - alpha * math.log(beta))

    def mean_parameters(self, eta):
        alpha, beta = self.shape_rate(eta)
        return np.array([math.log(beta) - special.digamma(alpha), alpha / beta])

    def conditional_variance(self, eta):
        alpha, beta = self.shape_rate(eta)
        return np.array(
            [
                [special.polygamma(1, alpha), -1.0 / beta],
                [-1.0 / beta, alpha / beta**2],
            ]
        )

    def sample(self, eta, rng):
        alpha, beta = self.shape_rate(eta)
        # Inverse-CDF draw: 1/X with X ~ Gamma(alpha, rate beta). One uniform
        # per draw, and the sample path is smooth in the natural parameters,
        # which keeps fixed-seed gradient maps continuous. Guard against
        # quantile underflow so the reciprocal stays finite.
        gamma_draw = special.gammaincinv(alpha, rng.random()) / beta
        return 1.0 / max(gamma_draw, np.finfo(float).tiny)

    def typical_value(self, eta):
        alpha, beta = self.shape_rate(eta)
        return beta / (alpha - 1.0) if alpha > 1.0 else beta / alpha


class Beta(Family):
    """Beta with T(x) = (log x, log(1-x)) on (0, 1)."""

    name = "beta"
    k = 2

    def is_valid(self, eta):
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (2,) or not np.all(np.isfinite(eta)):
            return False
        return eta[0] > -1.0 and eta[1] > -1.0

    def in_support(self, x):
        return np.isfinite(x) and 0 < x < 1

    def shape_params(self, eta) -> tuple[float, float]:
        self.require_valid(eta)
        return float(eta[0] + 1.0), float(eta[1] + 1.0)

    @staticmethod
    def from_shape_params(alpha: float, beta: float) -> np.ndarray:
        if not (alpha > 0 and beta > 0):
            raise ValueError(f"shape parameters must be positive, got {alpha}, {beta}")
        return np.array([alpha - 1.0, beta - 1.0])

    def sufficient_statistics(self, x):
        self.require_support(x)
        return np.array([math.log(x), math.log1p(-x)])

    def log_normalizer(self, eta):
        alpha, beta = self.shape_params(eta)
        return float(special.betaln(alpha, beta))

    def mean_parameters(self, eta):
        alpha, beta = self.shape_params(eta)
        dab = special.digamma(alpha + beta)
        return np.array([special.digamma(alpha) - dab, special.digamma(beta) - dab])

    def conditional_variance(self, eta):
        alpha, beta = self.shape_params(eta)
        tab = special.polygamma(1, alpha + beta)
        return np.array(
            [
                [special.polygamma(1, alpha) - tab, -tab],
                [-tab, special.polygamma(1, beta) - tab],
            ]
        )

    def sample(self, eta, rng):
        alpha, beta = self.shape_params(eta)
        # Inverse-CDF draw (see InvGamma.sample); concentrated conditionals
        # can still round to the closed endpoints, so clip into the open
        # interval.
        draw = special.betaincinv(alpha, beta, rng.random())
        return float(
            np.clip(draw, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
        )

    def typical_value(self, eta):
        alpha, beta = self.shape_params(eta)
        return alpha / (alpha + beta)
