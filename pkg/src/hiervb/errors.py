"""Exception types shared across the library."""


class HiervbError(Exception):
    """Base class for all library-specific errors."""


class SupportError(HiervbError, ValueError):
    """A point lies outside the support of a distribution family."""


class InvalidParametersError(HiervbError, ValueError):
    """Natural parameters do not define a normalizable density."""


class FactorizationError(HiervbError, ArithmeticError):
    """A matrix factorization failed or produced unusable pivots."""


class InvalidConditionalError(InvalidParametersError):
    """A conditional density in the approximation is improper.

    Carries the name of the offending block so optimizers can back off.
    """

    def __init__(self, block: str, message: str = ""):
        self.block = block
        super().__init__(message or f"invalid conditional for block '{block}'")


class NonFiniteJointError(HiervbError, ArithmeticError):
    """A joint draw produced a non-finite log density."""


class UnsupportedPriorError(HiervbError, ValueError):
    """A model declares a prior with no exponential-family mapping."""


class UnsupportedEstimatorError(HiervbError, ValueError):
    """The requested estimator cannot be applied to a block."""


class ConditioningError(HiervbError, ArithmeticError):
    """A regression system stayed singular after jitter escalation."""

    def __init__(self, block: str, message: str = ""):
        self.block = block
        super().__init__(message or f"singular regression system for block '{block}'")


class LineSearchError(HiervbError, RuntimeError):
    """Every line-search trial produced an unusable iterate."""


class UndefinedQualityError(HiervbError, ArithmeticError):
    """The R-squared diagnostic is undefined (degenerate log-density variance)."""


class ChainInitError(HiervbError, ValueError):
    """The sampler start point has a non-finite log density."""


class SchemaVersionError(HiervbError, ValueError):
    """A fit document was written under an incompatible schema version."""


class VariableMismatchError(HiervbError, ValueError):
    """Two artifacts being compared cover different variable sets."""
