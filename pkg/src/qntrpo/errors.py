"""Exception types shared across the package."""


class QntrpoError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(QntrpoError, ValueError):
    pass


class NonFiniteIterate(QntrpoError, ArithmeticError):
    """A conjugate-gradient iterate became NaN or Inf."""


class CurvatureTooSmall(QntrpoError):
    """The curvature pair is too weak for a positive definite BFGS update."""


class DegenerateCurvature(QntrpoError):
    """Curvature along the gradient direction is (numerically) zero."""


class CgFailure(QntrpoError):
    """A linear solve inside the dogleg step failed."""


class NoRealRoot(QntrpoError):
    """The dogleg boundary equation has no real root in the valid regime."""


class NotSpd(QntrpoError, ValueError):
    pass


class ObjectiveNonFinite(QntrpoError):
    pass


class NonFiniteRatio(QntrpoError):
    """An importance ratio overflowed while evaluating the surrogate."""


class EmptyBatch(QntrpoError, ValueError):
    pass


class SingularSystem(QntrpoError):
    pass


class ConfigError(QntrpoError, ValueError):
    """Invalid or unknown configuration entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ConfigMismatch(QntrpoError, ValueError):
    """Two run configurations cannot be compared."""
