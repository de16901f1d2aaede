"""Shared GMM machinery for the characteristic-IV and recentered estimators.

Parameters are searched in an unconstrained space: ``sigma = softplus(s)`` and,
on the recentered path, ``alpha = -softplus(a)``.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy import special

from apps.demand.exceptions import (
    ConditioningError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    NonFiniteEvaluationError,
    RankDeficiencyError,
    ReciVError,
)
from apps.demand.mixedlogit import ConsumerDraws, Theta, group_markets, invert_markets
from apps.demand.solvers import (
    GRADIENT_TOLERANCE,
    MAX_CONDITION_NUMBER,
    OptimizerMethod,
    OptimizerReport,
    gauss_newton,
    linear_gmm,
    quasi_newton,
    rd_grid,
)
from apps.instruments.recentered import dsigma_inverse_demand

logger = logging.getLogger(__name__)

GRID_POINTS = 50
GRID_UPPER = 10.0
MAX_GAUSS_NEWTON_STEPS = 100
# Smallest sigma handed to inverse_softplus when starting a search.
SIGMA_FLOOR = 1e-10

# Failures that make a single objective evaluation unusable without invalidating the problem.
EVALUATION_ERRORS = (ConditioningError, ConvergenceError, DivergenceError, NonFiniteEvaluationError)

# Estimator flag -> (family, instrument) understood by the estimation modules.
ESTIMATORS = {
    "char-blp": ("char", "blp"),
    "char-gh-quad": ("char", "gh_quadratic"),
    "char-gh-local": ("char", "gh_local"),
    "reciv-ssiv": ("reciv", "ssiv"),
    "reciv-fiv": ("reciv", "fiv"),
}


# =================================== TRANSFORMS ===================================
def softplus(value):
    """``log(1 + exp(value))`` without overflow."""
    return np.logaddexp(0.0, value)


def softplus_derivative(value):
    return special.expit(value)


def inverse_softplus(value):
    value = np.asarray(value, dtype=np.float64)
    if np.any(value <= 0):
        raise DomainError(f"softplus only takes positive values, got {value}")
    return value + np.log(-np.expm1(-value))


class MomentStyle(Enum):
    LEVELS_PERIOD2 = "levels_period2"
    FIRST_DIFFERENCES = "first_differences"


class WeightStyle(Enum):
    ZWZ_INVERSE = "zwz_inverse"
    IDENTITY = "identity"


# =================================== PROBLEM AND RESULT ===================================
@dataclass
class GmmProblem:
    """What an estimator solves: which moments, which weight, how many parameters."""

    markets: list
    instruments: str
    moment_style: MomentStyle
    weight_style: WeightStyle
    draws: ConsumerDraws
    n_moments: int
    n_parameters: int

    def __post_init__(self):
        self.moment_style = MomentStyle(self.moment_style)
        self.weight_style = WeightStyle(self.weight_style)
        if self.n_moments != self.n_parameters:
            raise DomainError(
                f"{self.instruments}: {self.n_moments} moments for {self.n_parameters} parameters; "
                "every system here is just-identified"
            )

    def weight(self, Z):
        if self.weight_style is WeightStyle.IDENTITY:
            return np.eye(Z.shape[1])
        cross = Z.T @ Z / Z.shape[0]
        condition_number = np.linalg.cond(cross)
        if not np.isfinite(condition_number) or condition_number > MAX_CONDITION_NUMBER:
            raise RankDeficiencyError(f"{self.instruments}: instruments are collinear", context=self.instruments)
        return np.linalg.inv(cross)


@dataclass
class MomentData:
    """Observation-level pieces needed for sandwich standard errors.

    ``residual_jacobian`` is ``d residual / d parameters`` holding the instruments fixed.
    ``ssiv`` carries the shift-share weights and recentered shocks when shock-level
    clustering is available.
    """

    Z: np.ndarray
    residuals: np.ndarray
    residual_jacobian: np.ndarray
    weight: np.ndarray
    market_index: np.ndarray
    parameter_names: list
    ssiv: Optional[dict] = None


@dataclass
class EstimationResult:
    estimator: str
    theta_hat: Theta
    report: OptimizerReport
    objective_value: float
    grid_start: np.ndarray
    mode: str = "cu"
    beta_hat: Optional[np.ndarray] = None
    se: Optional[dict] = None
    clustering: Optional[str] = None
    wall_time: float = 0.0
    fallback_trigger: Optional[str] = None
    failure: Optional[str] = None
    outer_iterations: int = 0
    meta: dict = field(default_factory=dict)
    moments: Optional[MomentData] = field(default=None, repr=False)

    @property
    def converged(self):
        return self.failure is None and bool(self.report.converged)

    def parameters(self):
        """Estimates keyed the way standard errors are keyed."""
        values = {"alpha": self.theta_hat.alpha}
        if self.beta_hat is not None:
            values.update({f"beta{index}": float(value) for index, value in enumerate(self.beta_hat)})
        values.update({f"sigma{index + 1}": float(value) for index, value in enumerate(self.theta_hat.sigma)})
        return values

    def as_dict(self):
        return {
            "estimator": self.estimator,
            "mode": self.mode,
            "converged": self.converged,
            "alpha": self.theta_hat.alpha,
            "sigma": self.theta_hat.sigma.tolist(),
            "beta": None if self.beta_hat is None else np.asarray(self.beta_hat).tolist(),
            "objective": float(self.objective_value),
            "grid_start": np.asarray(self.grid_start).tolist(),
            "report": self.report.as_dict(),
            "fallback_trigger": self.fallback_trigger,
            "failure": self.failure,
            "outer_iterations": self.outer_iterations,
            "se": self.se,
            "clustering": self.clustering,
            "wall_time": self.wall_time,
            "meta": self.meta,
        }


# =================================== LINEAR PIECES ===================================
def concentrate_linear(dependent, X, Z, weight, context="concentration"):
    """Linear IV-GMM coefficients of ``dependent`` (a vector or a matrix of columns) on ``X``.

    A matrix ``dependent`` is solved column by column, which gives the derivative of
    the concentrated coefficients when the columns are derivatives of ``dependent``.
    """
    dependent = np.asarray(dependent, dtype=np.float64)
    if dependent.ndim == 1:
        return linear_gmm(dependent, X, Z, weight=weight, context=context)
    return np.column_stack(
        [linear_gmm(dependent[:, column], X, Z, weight=weight, context=context) for column in range(dependent.shape[1])]
    )


def stacked_inverse_demand(markets, sigma, draws, deltas=None, derivative=False, config=None):
    """Inverse demand stacked across markets, optionally with ``d D / d sigma`` (``N x L``)."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if deltas is None:
        deltas = invert_markets(markets, sigma, draws, config)
    stacked = np.concatenate(deltas)
    if not derivative:
        return stacked, None
    per_market = [None] * len(markets)
    for positions, block in group_markets(markets):
        values = dsigma_inverse_demand(np.stack([deltas[i] for i in positions]), sigma, block.x1, draws)
        for row, index in enumerate(positions):
            per_market[index] = values[row]
    return stacked, np.vstack(per_market)


def market_index(markets):
    return np.concatenate([np.full(market.J, position) for position, market in enumerate(markets)])


def gmm_objective(moments, weight):
    moments = np.atleast_1d(moments)
    return float(moments @ weight @ moments)


# =================================== SEARCH ===================================
def grid_search(objective, n_points=GRID_POINTS, dims=2, upper=GRID_UPPER):
    """Best of ``n_points`` R_d points in ``[0, upper]^dims``; unusable points are skipped."""
    points = rd_grid(n_points, dims, 0.0, upper)
    values = np.full(n_points, np.inf)
    for index, point in enumerate(points):
        try:
            values[index] = objective(point)
        except EVALUATION_ERRORS as exc:
            logger.debug("grid point %s skipped: %s", point, exc)
    if not np.any(np.isfinite(values)):
        raise ConvergenceError("no grid point gave a finite objective", iterations=n_points)
    best = int(np.nanargmin(values))
    logger.info("grid start %s (objective %.6g)", points[best], values[best])
    return points[best], float(values[best])


def _failed_report(objective):
    return OptimizerReport(
        converged=False,
        iterations=0,
        final_step_norm=np.nan,
        final_gradient_norm=np.nan,
        objective=objective,
        method_used=OptimizerMethod.QUASI_NEWTON_FALLBACK,
    )


def minimize_with_fallback(moments, jacobian, weight, start, label="gmm"):
    """Gauss-Newton from ``start``, then BFGS from the same ``start`` if it stalls.

    Gauss-Newton is discarded when it uses all of its steps, fails, or ends with a
    gradient norm above ``GRADIENT_TOLERANCE``. Returns ``(point, report, trigger,
    failure)``; ``failure`` is set only when BFGS fails too.
    """
    start = np.atleast_1d(np.asarray(start, dtype=np.float64))

    def objective(u):
        return gmm_objective(moments(u), weight)

    try:
        point, report = gauss_newton(moments, jacobian, weight, start, max_iter=MAX_GAUSS_NEWTON_STEPS)
        if report.converged and report.final_gradient_norm <= GRADIENT_TOLERANCE:
            return point, report, None, None
        if not report.converged:
            trigger = f"no convergence in {report.iterations} steps"
        else:
            trigger = f"gradient norm {report.final_gradient_norm:.3e}"
    except ReciVError as exc:
        trigger = f"{exc.__class__.__name__}: {exc}"
    logger.info("%s: Gauss-Newton discarded (%s); switching to BFGS", label, trigger)

    try:
        point, report = quasi_newton(objective, start)
    except ReciVError as exc:
        logger.warning("%s: BFGS failed too: %s", label, exc)
        return start, _failed_report(np.nan), trigger, f"{exc.__class__.__name__}: {exc}"
    failure = None if report.converged else "BFGS did not converge"
    if failure:
        logger.warning("%s: %s (gradient norm %.3e)", label, failure, report.final_gradient_norm)
    return point, report, trigger, failure

