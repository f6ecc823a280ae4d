"""Multivariate Gaussian restricted to a declared precision sparsity pattern.

The precision matrix P may only be nonzero on the pattern; off-pattern
entries are structurally zero. Factorizations exploit the structure: the
pattern is reordered so that high-degree "hub" variables come last, the
remaining core is permuted to a narrow band (reverse Cuthill-McKee), and the
Cholesky factor is computed as a banded core plus dense border columns.
"""

from __future__ import annotations

import math
from functools import cached_property

import numpy as np
from scipy.linalg import cholesky_banded, solve_banded, solve_triangular
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import FactorizationError, InvalidParametersError
from .families import LOG_2PI, Family

# A Cholesky pivot below sqrt(PIVOT_RTOL * max diagonal) marks the matrix as
# numerically indefinite.
PIVOT_RTOL = 1e-12


class SparsityPattern:
    """Symmetric sparsity pattern over a ``dim``-dimensional vector.

    Stored as the list of index pairs (a, b) with a <= b, in lexicographic
    order, always including every diagonal entry.
    """

    def __init__(self, dim: int, pairs):
        if dim < 1:
            raise ValueError("dim must be at least 1")
        norm = {(min(a, b), max(a, b)) for a, b in pairs}
        norm.update((i, i) for i in range(dim))
        for a, b in norm:
            if not (0 <= a <= b < dim):
                raise ValueError(f"pair ({a}, {b}) outside dimension {dim}")
        self.dim = dim
        self.pairs = tuple(sorted(norm))
        self.rows = np.array([p[0] for p in self.pairs])
        self.cols = np.array([p[1] for p in self.pairs])
        self.index = {p: i for i, p in enumerate(self.pairs)}

    @classmethod
    def dense(cls, dim: int) -> "SparsityPattern":
        return cls(dim, [(a, b) for a in range(dim) for b in range(a, dim)])

    @classmethod
    def banded(cls, dim: int, bandwidth: int) -> "SparsityPattern":
        pairs = [
            (a, b) for a in range(dim) for b in range(a, min(dim, a + bandwidth + 1))
        ]
        return cls(dim, pairs)

    @classmethod
    def tridiagonal(cls, dim: int) -> "SparsityPattern":
        return cls.banded(dim, 1)

    @classmethod
    def bordered_banded(cls, dim: int, bandwidth: int, border) -> "SparsityPattern":
        """Band among the non-border indices plus dense border rows/columns."""
        border = sorted(set(border))
        core = [i for i in range(dim) if i not in border]
        pairs = [(b, j) for b in border for j in range(dim)]
        for ia, a in enumerate(core):
            for b in core[ia:]:
                if b - a <= bandwidth:
                    pairs.append((a, b))
        return cls(dim, pairs)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @cached_property
    def _plan(self):
        """Elimination order: hub variables last, RCM-permuted core first."""
        d = self.dim
        off = self.rows != self.cols
        degree = np.zeros(d, dtype=int)
        np.add.at(degree, self.rows[off], 1)
        np.add.at(degree, self.cols[off], 1)
        hub_cut = max(12, d // 2)
        hubs = [i for i in range(d) if degree[i] >= hub_cut]
        core = [i for i in range(d) if degree[i] < hub_cut]
        if core:
            in_core = set(core)
            edges = [
                (a, b)
                for a, b in zip(self.rows[off], self.cols[off])
                if a in in_core and b in in_core
            ]
            r = [a for a, _ in edges]
            c = [b for _, b in edges]
            pos = {node: i for i, node in enumerate(core)}
            n = len(core)
            adj = csr_matrix(
                (np.ones(len(r)), ([pos[i] for i in r], [pos[j] for j in c])),
                shape=(n, n),
            )
            rcm = reverse_cuthill_mckee(adj + adj.T, symmetric_mode=True)
            core = [core[i] for i in rcm]
        order = np.array(core + hubs, dtype=int)
        n_core = len(core)

        def bandwidth_under(position):
            width = 0
            for a, b in self.pairs:
                pa, pb = position[a], position[b]
                if pa < n_core and pb < n_core:
                    width = max(width, abs(int(pa) - int(pb)))
            return width

        position = np.empty(d, dtype=int)
        position[order] = np.arange(d)
        bandwidth = bandwidth_under(position)
        # Prefer the natural order when it is no wider: permutation-free
        # factorization is noticeably cheaper.
        natural = np.concatenate(
            [np.array([i for i in range(d) if i not in set(hubs)], dtype=int),
             np.array(hubs, dtype=int)]
        )
        nat_position = np.empty(d, dtype=int)
        nat_position[natural] = np.arange(d)
        nat_bandwidth = bandwidth_under(nat_position)
        if nat_bandwidth <= bandwidth:
            order, bandwidth = natural, nat_bandwidth
        identity = bool(np.array_equal(order, np.arange(d)))
        return order, n_core, bandwidth, identity

    def values_from_dense(self, mat: np.ndarray) -> np.ndarray:
        return mat[self.rows, self.cols]

    def dense_from_values(self, values: np.ndarray) -> np.ndarray:
        mat = np.zeros((self.dim, self.dim))
        mat[self.rows, self.cols] = values
        mat[self.cols, self.rows] = values
        return mat


def _upper_band_from_lower(lb: np.ndarray) -> np.ndarray:
    """Transpose a lower-banded Cholesky factor into solve_banded's upper form."""
    bw1, n = lb.shape
    ub = np.zeros_like(lb)
    for k in range(bw1):
        ub[bw1 - 1 - k, k:] = lb[k, : n - k]
    return ub


class PrecisionFactor:
    """Structured Cholesky P = L L' of a patterned precision matrix."""

    def __init__(self, pattern: SparsityPattern, precision: np.ndarray):
        order, n_core, bw, identity = pattern._plan
        d = pattern.dim
        perm = precision if identity else precision[np.ix_(order, order)]
        diag = np.diag(precision)
        if not np.all(np.isfinite(precision)):
            raise FactorizationError("precision matrix has non-finite entries")

        self.order = order
        self.identity_order = identity
        self.n_core = n_core
        self.bw = bw
        self.dim = d

        try:
            if n_core:
                ab = np.zeros((bw + 1, n_core))
                for k in range(bw + 1):
                    ab[k, : n_core - k] = np.diag(perm[:n_core, :n_core], -k)
                self._lb = cholesky_banded(ab, lower=True)
                self._ub = _upper_band_from_lower(self._lb)
            else:
                self._lb = None
            n_hub = d - n_core
            if n_hub:
                border = perm[:n_core, n_core:]
                x = (
                    solve_banded((bw, 0), self._lb, border)
                    if n_core
                    else np.zeros((0, n_hub))
                )
                schur = perm[n_core:, n_core:] - x.T @ x
                self._l22 = np.linalg.cholesky(schur)
                self._x = x
            else:
                self._l22 = None
                self._x = None
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"precision factorization failed: {exc}") from exc

        pivots = []
        if self._lb is not None:
            pivots.append(self._lb[0, :])
        if self._l22 is not None:
            pivots.append(np.diag(self._l22))
        self.pivots = np.concatenate(pivots)
        if not np.all(np.isfinite(self.pivots)):
            raise FactorizationError("non-finite Cholesky pivots")
        if np.min(self.pivots) ** 2 <= PIVOT_RTOL * np.max(diag):
            raise FactorizationError(
                f"Cholesky pivot {np.min(self.pivots):.3e} below tolerance"
            )

    @property
    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(self.pivots)))

    def _split(self, b):
        bp = b if self.identity_order else b[self.order]
        return bp[: self.n_core], bp[self.n_core :]

    def _join(self, core, hub):
        joined = np.concatenate([core, hub], axis=0)
        if self.identity_order:
            return joined
        out = np.empty_like(joined)
        out[self.order] = joined
        return out

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve P x = b for a vector or a matrix of column right-hand sides."""
        b = np.asarray(b, dtype=float)
        bc, bh = self._split(b)
        if self.n_core:
            yc = solve_banded((self.bw, 0), self._lb, bc)
        else:
            yc = bc
        if self._l22 is not None:
            yh = solve_triangular(self._l22, bh - self._x.T @ yc, lower=True)
            xh = solve_triangular(self._l22.T, yh, lower=False)
        else:
            xh = bh
        if self.n_core:
            rhs = yc - (self._x @ xh if self._x is not None else 0.0)
            xc = solve_banded((0, self.bw), self._ub, rhs)
        else:
            xc = yc
        return self._join(xc, xh)

    def half_solve_t(self, z: np.ndarray) -> np.ndarray:
        """Solve L' x = z; for z ~ N(0, I) the result has covariance P^{-1}."""
        z = np.asarray(z, dtype=float)
        zc, zh = self._split(z)
        if self._l22 is not None:
            xh = solve_triangular(self._l22.T, zh, lower=False)
        else:
            xh = zh
        if self.n_core:
            rhs = zc - (self._x @ xh if self._x is not None else 0.0)
            xc = solve_banded((0, self.bw), self._ub, rhs)
        else:
            xc = zc
        return self._join(xc, xh)

    def covariance(self) -> np.ndarray:
        sigma = self.solve(np.eye(self.dim))
        return 0.5 * (sigma + sigma.T)


class SparseGaussian(Family):
    """Multivariate Gaussian with pattern-restricted precision.

    Natural parameters pack as ``eta = (h, q)`` where the log density is
    ``h . x + sum_{(a,b)} q_ab x_a x_b - Z``; equivalently the precision P
    satisfies ``q_aa = -P_aa / 2`` and ``q_ab = -P_ab`` for a < b.
    """

    name = "gaussian-mv"

    # Factorizations are pure functions of eta; a small memo absorbs the
    # repeated validity/sampling/normalizer calls on the same conditional.
    _CACHE_SIZE = 16

    def __init__(self, dim: int, pattern: SparsityPattern | None = None):
        self.dim = dim
        self.pattern = pattern if pattern is not None else SparsityPattern.dense(dim)
        if self.pattern.dim != dim:
            raise ValueError("pattern dimension does not match family dimension")
        self.k = dim + self.pattern.n_pairs
        self._off = self.pattern.rows != self.pattern.cols
        self._factor_cache: dict[bytes, PrecisionFactor] = {}

    def __repr__(self):
        return f"SparseGaussian(dim={self.dim}, pairs={self.pattern.n_pairs})"

    def split(self, eta) -> tuple[np.ndarray, np.ndarray]:
        eta = np.asarray(eta, dtype=float)
        return eta[: self.dim], eta[self.dim :]

    def precision(self, eta) -> np.ndarray:
        _, q = self.split(eta)
        vals = np.where(self._off, -q, -2.0 * q)
        return self.pattern.dense_from_values(vals)

    def naturals(self, h: np.ndarray, precision: np.ndarray) -> np.ndarray:
        vals = precision[self.pattern.rows, self.pattern.cols]
        q = np.where(self._off, -vals, -0.5 * vals)
        return np.concatenate([np.asarray(h, dtype=float), q])

    def factor(self, eta) -> PrecisionFactor:
        eta = np.ascontiguousarray(eta, dtype=float)
        key = eta.tobytes()
        hit = self._factor_cache.get(key)
        if hit is None:
            hit = PrecisionFactor(self.pattern, self.precision(eta))
            if len(self._factor_cache) >= self._CACHE_SIZE:
                self._factor_cache.pop(next(iter(self._factor_cache)))
            self._factor_cache[key] = hit
        return hit

    def _checked_factor(self, eta) -> PrecisionFactor:
        try:
            return self.factor(eta)
        except FactorizationError as exc:
            raise InvalidParametersError(
                f"{self.name} natural parameters do not define a proper "
                f"distribution: {exc}"
            ) from exc

    def is_valid(self, eta):
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.k,) or not np.all(np.isfinite(eta)):
            return False
        try:
            self.factor(eta)
        except FactorizationError:
            return False
        return True

    def in_support(self, x):
        x = np.asarray(x)
        return x.shape == (self.dim,) and bool(np.all(np.isfinite(x)))

    def sufficient_statistics(self, x):
        self.require_support(x)
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, x[self.pattern.rows] * x[self.pattern.cols]])

    def mean_and_cov(self, eta) -> tuple[np.ndarray, np.ndarray]:
        h, _ = self.split(eta)
        fac = self._checked_factor(eta)
        return fac.solve(h), fac.covariance()

    def log_normalizer(self, eta):
        h, _ = self.split(eta)
        fac = self._checked_factor(eta)
        m = fac.solve(h)
        return float(0.5 * h @ m - 0.5 * fac.logdet + 0.5 * self.dim * LOG_2PI)

    def mean_parameters(self, eta):
        m, sigma = self.mean_and_cov(eta)
        a, b = self.pattern.rows, self.pattern.cols
        return np.concatenate([m, m[a] * m[b] + sigma[a, b]])

    def conditional_variance(self, eta):
        """Covariance of T(x); fourth Gaussian moments via Wick's theorem."""
        m, sigma = self.mean_and_cov(eta)
        a, b = self.pattern.rows, self.pattern.cols
        ma, mb = m[a], m[b]
        c_xx = sigma
        c_xq = m[None, a] * sigma[:, b] + m[None, b] * sigma[:, a]
        s_aa = sigma[np.ix_(a, a)]
        s_ab = sigma[np.ix_(a, b)]
        s_ba = sigma[np.ix_(b, a)]
        s_bb = sigma[np.ix_(b, b)]
        c_qq = (
            s_aa * s_bb
            + s_ab * s_ba
            + np.outer(ma, ma) * s_bb
            + np.outer(ma, mb) * s_ba
            + np.outer(mb, ma) * s_ab
            + np.outer(mb, mb) * s_aa
        )
        top = np.hstack([c_xx, c_xq])
        bottom = np.hstack([c_xq.T, c_qq])
        return np.vstack([top, bottom])

    def sample(self, eta, rng):
        h, _ = self.split(eta)
        fac = self._checked_factor(eta)
        m = fac.solve(h)
        return m + fac.half_solve_t(rng.standard_normal(self.dim))

    def typical_value(self, eta):
        h, _ = self.split(eta)
        return self._checked_factor(eta).solve(h)
