"""Exception types shared across the solver pipeline."""


class SlqError(Exception):
    """Base class for all solver errors."""


class ExpressionParseError(SlqError):
    """Scalar expression does not conform to the grammar."""

    def __init__(self, message: str, text: str, position: int):
        super().__init__(f"{message} (at position {position} in {text!r})")
        self.text = text
        self.position = position


class DimensionMismatch(SlqError):
    """Problem data have inconsistent shapes."""


class NonSymmetric(SlqError):
    """A weight matrix that must be symmetric is not."""


class NotPositiveDefinite(SlqError):
    """A weight matrix violates its required definiteness."""

    def __init__(self, name: str, eigenvalue: float):
        super().__init__(f"{name} is not positive definite (eigenvalue {eigenvalue:.3e})")
        self.name = name
        self.eigenvalue = eigenvalue


class NonPositiveBudget(SlqError):
    """Constraint budget must be strictly positive."""


class ZeroAnchor(SlqError):
    """Anchor with zero quadratic level cannot be rescaled."""


class PositivityLost(SlqError):
    """Smallest eigenvalue of the control weight S fell below tolerance."""


class StepUnstable(SlqError):
    """Backward integration blew up."""


class NotDeterministic(SlqError):
    """Analytic backend requires all random fields to be constant in B."""


class RegressionSingular(SlqError):
    """Regression basis is numerically rank deficient."""


class BasisTooSmall(SlqError):
    """Regression basis must contain the constant function."""


class GramSingularEquality(SlqError):
    """Equality-constraint directions are linearly dependent."""


class EqualityInfeasible(SlqError):
    """Equality rows of the dual system admit no solution."""


class NoConvergence(SlqError):
    """Iterative dual solver hit its iteration cap."""


class GramSingular(SlqError):
    """Gram matrix is singular where invertibility is required."""


class SeedCollision(SlqError):
    """Verification ensemble reuses the training seed."""


class NonFiniteState(SlqError):
    """Simulated state exploded to a non-finite value."""


class VInversionDrift(SlqError):
    """Forward flow lost invertibility beyond tolerance."""


class ConfigError(SlqError):
    """Problem file is malformed."""
