"""First-difference GMM with recentered instruments.

Two schemes share one problem object. The continuously updating estimator rebuilds
the instruments at every evaluated ``theta`` and searches over ``(sigma, alpha)``
with a numeric moment jacobian. The iterative estimator freezes the instruments at
the previous estimate, concentrates out ``alpha`` on demeaned data and repeats until
``sigma`` stops moving.
"""

import logging
import time
from enum import Enum

import numpy as np

from apps.demand.exceptions import DegenerateRegressorError, MissingLaggedDataError, RankDeficiencyError
from apps.demand.mixedlogit import Theta
from apps.demand.solvers import STEP_TOLERANCE, finite_difference_jacobian, linear_gmm
from apps.instruments.recentered import PermutationScope, estimate_pass_through, shock_deviations, ssiv_weights
from apps.instruments.sets import DEFAULT_PERMUTATIONS, InstrumentKind, RecenteredInstruments

from .gmm import (
    GRID_POINTS,
    GRID_UPPER,
    SIGMA_FLOOR,
    EstimationResult,
    GmmProblem,
    MomentData,
    MomentStyle,
    WeightStyle,
    concentrate_linear,
    gmm_objective,
    grid_search,
    inverse_softplus,
    market_index,
    minimize_with_fallback,
    softplus,
    softplus_derivative,
    stacked_inverse_demand,
)

logger = logging.getLogger(__name__)

MAX_OUTER_ITERATIONS = 100
# Grid starts with a nonnegative IV slope are pulled down to this price coefficient.
ALPHA_CEILING = -1e-2


class RecenteredIv(Enum):
    SSIV = "ssiv"
    FIV = "fiv"

    @property
    def instrument_kind(self):
        return InstrumentKind.RECIV_SSIV if self is RecenteredIv.SSIV else InstrumentKind.RECIV_FIV


class EstimationMode(Enum):
    CU = "cu"
    ITERATIVE = "iterative"


def _paired(markets):
    if hasattr(markets, "paired_markets"):
        return markets.paired_markets()
    return [market for market in markets if market.lagged is not None]


class RecenteredProblem:
    """Moments ``Z(theta)' (dD(sigma) - alpha dp) / N`` over markets observed in both periods."""

    def __init__(
        self,
        markets,
        iv_kind,
        draws,
        pi_check=None,
        permutations=DEFAULT_PERMUTATIONS,
        scope=PermutationScope.ACROSS_ALL,
        seed=0,
        shock_means=None,
        config=None,
    ):
        self.markets = _paired(markets)
        if not self.markets:
            raise MissingLaggedDataError("recentered estimation needs markets observed in both periods")
        self.iv_kind = RecenteredIv(iv_kind)
        self.draws = draws
        self.config = config
        self.shock_means = shock_means if shock_means is not None else [None] * len(self.markets)
        if pi_check is None:
            try:
                pi_check = estimate_pass_through(self.markets, shock_means=shock_means).pi_check
            except DegenerateRegressorError as exc:
                context = f"recentered {self.iv_kind.value} pass-through"
                raise RankDeficiencyError(f"{context}: {exc}", context=context) from exc
        self.pi_check = float(pi_check)
        self.builder = RecenteredInstruments(
            self.markets,
            self.iv_kind.instrument_kind,
            draws,
            self.pi_check,
            permutations=permutations,
            scope=scope,
            seed=seed,
            shock_means=shock_means,
            config=config,
        )
        self.lagged_markets = [market.lagged for market in self.markets]
        self.price_change = np.concatenate([market.p - market.lagged.p for market in self.markets])
        self.g = np.concatenate([market.g for market in self.markets])
        self.n_sigma = self.markets[0].x1.shape[1]
        self.problem = GmmProblem(
            markets=self.markets,
            instruments=self.iv_kind.instrument_kind.value,
            moment_style=MomentStyle.FIRST_DIFFERENCES,
            weight_style=WeightStyle.IDENTITY,
            draws=draws,
            n_moments=1 + self.n_sigma,
            n_parameters=1 + self.n_sigma,
        )
        self.weight = np.eye(1 + self.n_sigma)
        self.context = f"recentered {self.iv_kind.value}"
        self._current = {}

    @property
    def N(self):
        return self.price_change.size

    def _current_demand(self, sigma, derivative):
        key = (tuple(np.atleast_1d(sigma).tolist()), derivative)
        if key not in self._current:
            self._current = {
                key: stacked_inverse_demand(self.markets, sigma, self.draws, derivative=derivative, config=self.config)
            }
        return self._current[key]

    def first_differences(self, sigma, derivative=False):
        """``D(s_2) - D(s_1)`` stacked, and its ``sigma`` derivative when asked."""
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        current, d_current = self._current_demand(sigma, derivative)
        lagged, d_lagged = stacked_inverse_demand(
            self.lagged_markets, sigma, self.draws, deltas=self.builder.lagged_deltas(sigma), derivative=derivative
        )
        if not derivative:
            return current - lagged, None
        return current - lagged, d_current - d_lagged

    def instruments(self, theta):
        return np.vstack(self.builder(theta))

    def require_full_rank(self, theta):
        Z = self.instruments(theta)
        if np.linalg.matrix_rank(Z) < Z.shape[1]:
            raise RankDeficiencyError(f"{self.context}: instruments do not have full column rank", context=self.context)
        return Z

    def alpha_start(self, sigma):
        """IV slope of the first-differenced inverse demand on price changes, instrumented by ``g``."""
        difference, _ = self.first_differences(sigma)
        ones = np.ones(self.N)
        coefficients = linear_gmm(
            difference,
            np.column_stack([ones, self.price_change]),
            np.column_stack([ones, self.g]),
            context=f"{self.context} starting slope",
        )
        return float(coefficients[1])

    def start_theta(self, sigma):
        return Theta(alpha=min(self.alpha_start(sigma), ALPHA_CEILING), sigma=sigma)

    def residuals(self, theta):
        difference, _ = self.first_differences(theta.sigma)
        return difference - theta.alpha * self.price_change

    def moments(self, theta):
        return self.instruments(theta).T @ self.residuals(theta) / self.N

    def objective(self, theta):
        return gmm_objective(self.moments(theta), self.weight)

    def grid_objective(self, sigma):
        return self.objective(self.start_theta(sigma))

    def concentrated(self, Z, sigma, derivative=False):
        """``alpha(sigma)``, moments and their jacobian on demeaned data with ``Z`` held fixed."""
        difference, d_difference = self.first_differences(sigma, derivative=derivative)
        Zc = Z - Z.mean(axis=0)
        y = difference - difference.mean()
        x = (self.price_change - self.price_change.mean())[:, None]
        alpha = concentrate_linear(y, x, Zc, self.weight, context=self.context)[0]
        h = Zc.T @ (y - alpha * x[:, 0]) / self.N
        if not derivative:
            return alpha, h, None
        dy = d_difference - d_difference.mean(axis=0)
        dalpha = concentrate_linear(dy, x, Zc, self.weight, context=self.context)
        return alpha, h, Zc.T @ (dy - x @ dalpha) / self.N

    def moment_data(self, theta):
        difference, d_difference = self.first_differences(theta.sigma, derivative=True)
        ssiv = None
        if self.iv_kind is RecenteredIv.SSIV:
            deltas = self.builder.lagged_deltas(theta.sigma)
            ssiv = {
                "pi_check": self.pi_check,
                "weights": [
                    ssiv_weights(market, theta, self.pi_check, self.draws, check_delta=delta)
                    for market, delta in zip(self.markets, deltas)
                ],
                "shocks": [shock_deviations(market, mean) for market, mean in zip(self.markets, self.shock_means)],
            }
        return MomentData(
            Z=self.instruments(theta),
            residuals=difference - theta.alpha * self.price_change,
            residual_jacobian=np.column_stack([-self.price_change, d_difference]),
            weight=self.weight,
            market_index=market_index(self.markets),
            parameter_names=["alpha"] + [f"sigma{index + 1}" for index in range(self.n_sigma)],
            ssiv=ssiv,
        )


def _theta_from(u):
    return Theta(alpha=-softplus(u[-1]), sigma=softplus(u[:-1]))


def _grid_start(problem, grid_points, grid_upper):
    sigma, _ = grid_search(problem.grid_objective, n_points=grid_points, dims=problem.n_sigma, upper=grid_upper)
    theta = problem.start_theta(sigma)
    problem.require_full_rank(theta)
    return theta


def _result(problem, theta, report, grid_start, mode, trigger, failure, started, outer_iterations=0, meta=None):
    result = EstimationResult(
        estimator=f"reciv-{problem.iv_kind.value}",
        theta_hat=theta,
        report=report,
        objective_value=problem.objective(theta),
        grid_start=np.concatenate([grid_start.sigma, [grid_start.alpha]]),
        mode=mode.value,
        fallback_trigger=trigger,
        failure=failure,
        outer_iterations=outer_iterations,
        wall_time=time.perf_counter() - started,
        meta={"pi_check": problem.pi_check, "n_products": problem.N, **(meta or {})},
        moments=problem.moment_data(theta),
    )
    result.meta.update(problem.builder.meta(theta))
    logger.info(
        "%s (%s): alpha %.4f sigma %s converged=%s",
        problem.context,
        mode.value,
        theta.alpha,
        theta.sigma,
        result.converged,
    )
    return result


def estimate_cu_recentered(markets, iv_kind, draws, grid_points=GRID_POINTS, grid_upper=GRID_UPPER, **options):
    """Continuously updating GMM over ``(softplus^-1 sigma, softplus^-1 -alpha)``.

    ``options`` go to ``RecenteredProblem`` (``pi_check``, ``permutations``, ``scope``,
    ``seed``, ``shock_means``, ``config``).
    """
    started = time.perf_counter()
    problem = RecenteredProblem(markets, iv_kind, draws, **options)
    start_theta = _grid_start(problem, grid_points, grid_upper)
    start = np.concatenate(
        [inverse_softplus(np.maximum(start_theta.sigma, SIGMA_FLOOR)), [inverse_softplus(-start_theta.alpha)]]
    )

    def moments(u):
        return problem.moments(_theta_from(u))

    def jacobian(u):
        return finite_difference_jacobian(moments, u)

    point, report, trigger, failure = minimize_with_fallback(
        moments, jacobian, problem.weight, start, label=problem.context
    )
    return _result(problem, _theta_from(point), report, start_theta, EstimationMode.CU, trigger, failure, started)


def iterative_step(problem, theta):
    """Freeze the instruments at ``theta`` and re-estimate; returns ``(theta, report, trigger, failure)``."""
    Z = problem.instruments(theta)

    def moments(u):
        return problem.concentrated(Z, softplus(u))[1]

    def jacobian(u):
        return problem.concentrated(Z, softplus(u), derivative=True)[2] * softplus_derivative(u)

    start = inverse_softplus(np.maximum(theta.sigma, SIGMA_FLOOR))
    point, report, trigger, failure = minimize_with_fallback(
        moments, jacobian, problem.weight, start, label=f"{problem.context} (iterative)"
    )
    sigma = softplus(point)
    alpha, _, _ = problem.concentrated(Z, sigma)
    return Theta(alpha=alpha, sigma=sigma), report, trigger, failure


def estimate_iterative_recentered(
    markets,
    iv_kind,
    draws,
    max_outer=MAX_OUTER_ITERATIONS,
    grid_points=GRID_POINTS,
    grid_upper=GRID_UPPER,
    **options,
):
    """Outer loop of ``iterative_step`` until ``|sigma_new - sigma| <= STEP_TOLERANCE``."""
    started = time.perf_counter()
    problem = RecenteredProblem(markets, iv_kind, draws, **options)
    start_theta = _grid_start(problem, grid_points, grid_upper)
    theta = start_theta
    outer_log = []
    report, trigger, failure = None, None, None
    for outer in range(1, max_outer + 1):
        updated, report, step_trigger, failure = iterative_step(problem, theta)
        trigger = step_trigger or trigger
        step = float(np.linalg.norm(updated.sigma - theta.sigma))
        outer_log.append({"iteration": outer, "alpha": updated.alpha, "sigma": updated.sigma.tolist(), "step": step})
        logger.info("%s outer iteration %d: sigma %s step %.3e", problem.context, outer, updated.sigma, step)
        theta = updated
        if failure is not None or step <= STEP_TOLERANCE:
            break
    else:
        failure = f"outer loop did not settle in {max_outer} iterations"
        logger.warning("%s: %s", problem.context, failure)
    return _result(
        problem,
        theta,
        report,
        start_theta,
        EstimationMode.ITERATIVE,
        trigger,
        failure,
        started,
        outer_iterations=len(outer_log),
        meta={"outer_log": outer_log},
    )


def estimate_recentered(markets, iv_kind, draws, mode=EstimationMode.CU, **options):
    if EstimationMode(mode) is EstimationMode.ITERATIVE:
        return estimate_iterative_recentered(markets, iv_kind, draws, **options)
    return estimate_cu_recentered(markets, iv_kind, draws, **options)
