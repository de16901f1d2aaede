"""Errors raised by the demand, instrument and estimation code.

Everything derives from ``ReciVError`` so that management commands and the
Monte Carlo workers can catch one base class.
"""


class ReciVError(Exception):
    """Base class for every library error."""


# =================================== INPUT / DOMAIN ERRORS ===================================
class DomainError(ReciVError, ValueError):
    """An argument lies outside the domain where the operation is defined."""


class UnsupportedDimensionError(DomainError):
    pass


class ShapeMismatchError(DomainError):
    pass


class MissingLaggedDataError(DomainError):
    pass


class DegenerateRegressorError(DomainError):
    pass


class UnsupportedClusteringError(DomainError):
    pass


# =================================== NUMERICAL FAILURES ===================================
class DivergenceError(ReciVError):
    """An iteration produced a non-finite value."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class ConvergenceError(ReciVError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class RankDeficiencyError(ReciVError):
    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


class ConditioningError(ReciVError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class NonFiniteEvaluationError(ReciVError):
    """A function evaluation returned NaN or inf; ``coordinate`` names the perturbed input."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class PricingError(ReciVError):
    """No Bertrand-Nash price vector was found for a market."""
