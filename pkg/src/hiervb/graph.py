"""Hierarchical approximation q(x) = prod_i q(x_i | parents).

A graph is an ordered DAG of blocks. Each block owns an exponential family,
a link giving the prior's natural parameters as a function of parent values,
and a feature basis: the conditional natural parameters are

    eta_cond = prior_link(parents) + sum_j psi_j(parents) * coef_j,

where the coefficient vectors ``coef_j`` are the free variational state.
With the constant basis (psi_1 = 1) this is the familiar offset-on-top-of-
the-prior form; extra features add parent-dependent interaction terms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidConditionalError, UnsupportedPriorError
from .families import AffineSupport, Family, GaussianUni, InvGamma

# Weakly-informative stand-in for improper location priors: N(0, 100).
DEFAULT_DIFFUSE_NATURALS = (0.0, -0.005)
# Conditional variance above this marks a prior as effectively improper.
NEAR_IMPROPER_VARIANCE = 1e4


class IndependenceWarning(UserWarning):
    """Several top-level blocks are mutually independent under q."""


@dataclass(frozen=True)
class FeatureBasis:
    """Feature functions psi_1..psi_J of the parent values, psi_1 == 1.

    ``shrink`` marks which coefficients receive ridge regularization when the
    regression systems are solved; by default every feature beyond the
    constant is shrunk.
    """

    functions: tuple[Callable[[dict], float], ...]
    names: tuple[str, ...]
    shrink: tuple[bool, ...]

    def __post_init__(self):
        if len(self.functions) < 1:
            raise ValueError("a basis needs at least the constant feature")
        if not (len(self.functions) == len(self.names) == len(self.shrink)):
            raise ValueError("basis fields must have equal length")

    @classmethod
    def constant(cls) -> "FeatureBasis":
        return cls((lambda pv: 1.0,), ("1",), (False,))

    @classmethod
    def polynomial(cls, parent: str, degree: int) -> "FeatureBasis":
        """Basis (1, p, p^2, ..., p^degree) in the named parent."""

        def power(d):
            return lambda pv: float(pv[parent]) ** d

        functions = (lambda pv: 1.0,) + tuple(power(d) for d in range(1, degree + 1))
        names = ("1",) + tuple(
            parent if d == 1 else f"{parent}^{d}" for d in range(1, degree + 1)
        )
        shrink = (False,) + (True,) * degree
        return cls(functions, names, shrink)

    @property
    def size(self) -> int:
        return len(self.functions)

    def evaluate(self, parent_values: dict) -> np.ndarray:
        return np.array([f(parent_values) for f in self.functions])


@dataclass(frozen=True)
class Block:
    """One conditional q(x_i | parents) of the approximation."""

    name: str
    family: Family
    parents: tuple[str, ...] = ()
    prior_link: Callable[[dict], np.ndarray] | None = None
    basis: FeatureBasis = field(default_factory=FeatureBasis.constant)
    transform: AffineSupport | None = None
    coord_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.prior_link is None:
            zeros = np.zeros(self.family.k)
            object.__setattr__(self, "prior_link", lambda pv: zeros)
        if not self.coord_names:
            dim = getattr(self.family, "dim", 1)
            names = (
                (self.name,)
                if dim == 1
                else tuple(f"{self.name}[{i + 1}]" for i in range(dim))
            )
            object.__setattr__(self, "coord_names", names)

    @property
    def k(self) -> int:
        return self.family.k

    @property
    def n_features(self) -> int:
        return self.basis.size

    @property
    def n_coef(self) -> int:
        return self.k * self.basis.size

    @property
    def dim(self) -> int:
        return getattr(self.family, "dim", 1)

    def to_internal(self, x):
        return self.transform.to_internal(x) if self.transform else x

    def from_internal(self, u):
        return self.transform.from_internal(u) if self.transform else u

    @property
    def log_jacobian(self) -> float:
        return self.transform.log_jacobian if self.transform else 0.0

    def features(self, parent_values: dict) -> np.ndarray:
        return self.basis.evaluate(parent_values)

    def conditional_naturals(
        self, parent_values: dict, coefs: np.ndarray, check: bool = True
    ) -> np.ndarray:
        eta = np.asarray(self.prior_link(parent_values), dtype=float)
        eta = eta + self.features(parent_values) @ coefs
        if check and not self.family.is_valid(eta):
            raise InvalidConditionalError(self.name)
        return eta

    def suff_stats(self, x) -> np.ndarray:
        return self.family.sufficient_statistics(self.to_internal(x))

    def log_density(self, x, eta: np.ndarray) -> float:
        t = self.suff_stats(x)
        return float(t @ eta - self.family.log_normalizer(eta) + self.log_jacobian)


class VariationalState:
    """Per-block coefficient arrays of shape (n_features, k)."""

    def __init__(self, coefs: dict[str, np.ndarray]):
        self.coefs = {name: np.array(c, dtype=float) for name, c in coefs.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.coefs[name]

    def copy(self) -> "VariationalState":
        return VariationalState(self.coefs)

    def allclose(self, other: "VariationalState", **kw) -> bool:
        return set(self.coefs) == set(other.coefs) and all(
            np.allclose(c, other.coefs[n], **kw) for n, c in self.coefs.items()
        )


@dataclass
class BlockDraw:
    """What one ancestral pass records about one block."""

    value: object
    eta: np.ndarray
    features: np.ndarray
    prior_naturals: np.ndarray
    log_density: float


class ApproximationGraph:
    """Topologically ordered blocks plus flat-vector bookkeeping."""

    def __init__(self, blocks):
        self.blocks = tuple(blocks)
        self.by_name = {b.name: b for b in self.blocks}
        if len(self.by_name) != len(self.blocks):
            raise ValueError("duplicate block names")
        seen = set()
        for b in self.blocks:
            missing = [p for p in b.parents if p not in seen]
            if missing:
                raise ValueError(
                    f"block '{b.name}' lists parents {missing} that do not precede it"
                )
            seen.add(b.name)
        self.slices: dict[str, slice] = {}
        offset = 0
        for b in self.blocks:
            self.slices[b.name] = slice(offset, offset + b.n_coef)
            offset += b.n_coef
        self.n_params = offset

    @property
    def coord_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for b in self.blocks:
            names.extend(b.coord_names)
        return tuple(names)

    def flatten(self, state: VariationalState) -> np.ndarray:
        out = np.empty(self.n_params)
        for b in self.blocks:
            out[self.slices[b.name]] = state[b.name].ravel()
        return out

    def unflatten(self, vec: np.ndarray) -> VariationalState:
        coefs = {}
        for b in self.blocks:
            coefs[b.name] = np.asarray(vec[self.slices[b.name]]).reshape(
                b.n_features, b.k
            )
        return VariationalState(coefs)

    def conditional_naturals(
        self, name: str, parent_values: dict, state: VariationalState
    ) -> np.ndarray:
        return self.by_name[name].conditional_naturals(parent_values, state[name])

    def ancestral_pass(
        self, state: VariationalState, rng: np.random.Generator
    ) -> tuple[dict, dict[str, BlockDraw]]:
        """Sample all blocks in order, recording conditionals and densities."""
        assignment: dict = {}
        draws: dict[str, BlockDraw] = {}
        for b in self.blocks:
            pv = {p: assignment[p] for p in b.parents}
            prior = np.asarray(b.prior_link(pv), dtype=float)
            psi = b.features(pv)
            eta = prior + psi @ state[b.name]
            if not b.family.is_valid(eta):
                raise InvalidConditionalError(b.name)
            u = b.family.sample(eta, rng)
            x = b.from_internal(u)
            logq = float(
                b.family.sufficient_statistics(u) @ eta
                - b.family.log_normalizer(eta)
                + b.log_jacobian
            )
            assignment[b.name] = x
            draws[b.name] = BlockDraw(x, eta, psi, prior, logq)
        return assignment, draws

    def draw_joint(self, state: VariationalState, rng: np.random.Generator) -> dict:
        return self.ancestral_pass(state, rng)[0]

    def log_q(self, state: VariationalState, assignment: dict) -> float:
        total = 0.0
        for b in self.blocks:
            pv = {p: assignment[p] for p in b.parents}
            eta = b.conditional_naturals(pv, state[b.name])
            total += b.log_density(assignment[b.name], eta)
        return total

    def is_state_valid_at(self, state: VariationalState, assignment: dict) -> bool:
        """Check every conditional at the parent values of one assignment."""
        for b in self.blocks:
            pv = {p: assignment[p] for p in b.parents}
            try:
                b.conditional_naturals(pv, state[b.name])
            except InvalidConditionalError:
                return False
        return True

    def typical_values(self, state: VariationalState) -> dict:
        """Deterministic representative assignment (conditional means chain)."""
        values: dict = {}
        for b in self.blocks:
            pv = {p: values[p] for p in b.parents}
            eta = b.conditional_naturals(pv, state[b.name])
            values[b.name] = b.from_internal(b.family.typical_value(eta))
        return values

    def init_state(self) -> VariationalState:
        """Zero coefficients, with a weakly-informative offset where needed.

        A Gaussian block whose prior alone is improper, or so diffuse that a
        coordinate's variance exceeds ``NEAR_IMPROPER_VARIANCE``, starts from
        an added N(0, 100) precision on each coordinate so that the initial
        approximation is proper and yields sane draws.
        """
        coefs = {b.name: np.zeros((b.n_features, b.k)) for b in self.blocks}
        state = VariationalState(coefs)
        values: dict = {}
        for b in self.blocks:
            pv = {p: values[p] for p in b.parents}
            prior = np.asarray(b.prior_link(pv), dtype=float)
            if not b.family.is_valid(prior) or self._near_improper(b, prior):
                state.coefs[b.name][0] = state.coefs[b.name][0] + self._offset(b)
            eta = b.conditional_naturals(pv, state[b.name])
            values[b.name] = b.from_internal(b.family.typical_value(eta))
        return state

    @staticmethod
    def _near_improper(block: Block, eta: np.ndarray) -> bool:
        fam = block.family
        if isinstance(fam, GaussianUni):
            return -0.5 / eta[1] > NEAR_IMPROPER_VARIANCE
        if hasattr(fam, "mean_and_cov"):
            _, sigma = fam.mean_and_cov(eta)
            return bool(np.max(np.diag(sigma)) > NEAR_IMPROPER_VARIANCE)
        return False

    @staticmethod
    def _offset(block: Block) -> np.ndarray:
        fam = block.family
        if isinstance(fam, GaussianUni):
            return np.array(DEFAULT_DIFFUSE_NATURALS)
        if hasattr(fam, "pattern"):
            off = np.zeros(fam.k)
            diag = [
                fam.dim + i for i, (a, b) in enumerate(fam.pattern.pairs) if a == b
            ]
            off[diag] = DEFAULT_DIFFUSE_NATURALS[1]
            return off
        raise UnsupportedPriorError(
            f"no weakly-informative default for family {fam.name} in block "
            f"'{block.name}'"
        )


# --- model specifications -> approximation graphs ---------------------------


@dataclass(frozen=True)
class ExpFamilyPrior:
    """A conditional prior already in the exponential family.

    ``link`` maps parent values to natural parameters; ``constant`` is a
    shorthand for a parent-free prior.
    """

    family: Family
    link: Callable[[dict], np.ndarray] | None = None
    constant: tuple | None = None

    def resolve_link(self) -> Callable[[dict], np.ndarray]:
        if self.link is not None:
            return self.link
        if self.constant is None:
            raise ValueError("ExpFamilyPrior needs either link or constant")
        fixed = np.array(self.constant, dtype=float)
        return lambda pv: fixed


@dataclass(frozen=True)
class FlatLocationPrior:
    """Improper flat prior on a location; mapped to a Gaussian."""


@dataclass(frozen=True)
class HalfCauchyScalePrior:
    """Half-Cauchy prior on a scale; mapped to inverse-Gamma on the square."""

    scale: float


@dataclass(frozen=True)
class BlockSpec:
    name: str
    prior: object
    parents: tuple[str, ...] = ()
    basis: FeatureBasis | None = None
    transform: AffineSupport | None = None
    coord_names: tuple[str, ...] = ()


@dataclass(frozen=True)
class ModelSpec:
    """Ordered block declarations in generative order."""

    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        seen = set()
        for bs in self.blocks:
            for p in bs.parents:
                if p not in seen:
                    raise ValueError(
                        f"block '{bs.name}' refers to parent '{p}' declared later"
                    )
            seen.add(bs.name)


def build_approximation(spec: ModelSpec) -> ApproximationGraph:
    """Mirror a model specification into an approximation graph.

    Exponential-family priors are reused verbatim as the conditional's
    offset-free part. Flat location priors become Gaussian blocks with a zero
    link; half-Cauchy scale priors become inverse-Gamma blocks on the squared
    scale with alpha = 1/2, beta = scale^2 / 2.
    """
    blocks = []
    for bs in spec.blocks:
        prior = bs.prior
        transform = bs.transform
        if isinstance(prior, ExpFamilyPrior):
            family = prior.family
            link = prior.resolve_link()
        elif isinstance(prior, FlatLocationPrior):
            family = GaussianUni()
            zeros = np.zeros(2)
            link = lambda pv, _z=zeros: _z  # noqa: E731
        elif isinstance(prior, HalfCauchyScalePrior):
            family = InvGamma()
            fixed = InvGamma.from_shape_rate(0.5, prior.scale**2 / 2.0)
            link = lambda pv, _f=fixed: _f  # noqa: E731
        else:
            raise UnsupportedPriorError(
                f"block '{bs.name}' declares prior {type(prior).__name__} with no "
                "exponential-family mapping"
            )
        blocks.append(
            Block(
                name=bs.name,
                family=family,
                parents=tuple(bs.parents),
                prior_link=link,
                basis=bs.basis if bs.basis is not None else FeatureBasis.constant(),
                transform=transform,
                coord_names=tuple(bs.coord_names),
            )
        )
    graph = ApproximationGraph(blocks)
    top = [b.name for b in graph.blocks if not b.parents]
    if len(top) > 1:
        warnings.warn(
            f"top-level blocks {top} are mutually independent under the "
            "approximation; declare features or a joint block to couple them",
            IndependenceWarning,
            stacklevel=2,
        )
    return graph
