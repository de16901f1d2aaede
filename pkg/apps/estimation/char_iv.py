"""Period-2 GMM with characteristic-based instruments, concentrating out ``(alpha, beta)``."""

import logging
import time
from enum import Enum

import numpy as np

from apps.demand.exceptions import DomainError
from apps.demand.mixedlogit import Theta
from apps.instruments.sets import InstrumentKind, build_instrument_set

from .gmm import (
    SIGMA_FLOOR,
    EstimationResult,
    GmmProblem,
    MomentData,
    MomentStyle,
    WeightStyle,
    concentrate_linear,
    grid_search,
    inverse_softplus,
    market_index,
    minimize_with_fallback,
    softplus,
    softplus_derivative,
    stacked_inverse_demand,
)

logger = logging.getLogger(__name__)


class CharacteristicIv(Enum):
    BLP = "blp"
    GH_QUADRATIC = "gh_quadratic"
    GH_LOCAL = "gh_local"

    @property
    def label(self):
        return {"blp": "char-blp", "gh_quadratic": "char-gh-quad", "gh_local": "char-gh-local"}[self.value]

    @property
    def instrument_kind(self):
        return {
            CharacteristicIv.BLP: InstrumentKind.BLP_SUM,
            CharacteristicIv.GH_QUADRATIC: InstrumentKind.GH_QUADRATIC,
            CharacteristicIv.GH_LOCAL: InstrumentKind.GH_LOCAL,
        }[self]


class CharacteristicIvProblem:
    """Moments ``Z' xi(sigma) / N`` with ``Z = (g, x, two characteristic IVs)``."""

    def __init__(self, markets, iv_kind, draws, config=None):
        self.markets = [market for market in markets if market.period == 2]
        if not self.markets:
            raise DomainError("characteristic-IV estimation needs period-2 markets")
        self.iv_kind = CharacteristicIv(iv_kind)
        self.draws = draws
        self.config = config
        instruments = build_instrument_set(self.markets, self.iv_kind.instrument_kind)
        self.price = np.concatenate([market.p for market in self.markets])
        self.x = np.vstack([market.x for market in self.markets])
        self.X = np.column_stack([self.price, self.x])
        self.Z = np.column_stack([np.concatenate([market.g for market in self.markets]), self.x, instruments.stacked()])
        self.n_sigma = self.markets[0].x1.shape[1]
        self.problem = GmmProblem(
            markets=self.markets,
            instruments=self.iv_kind.value,
            moment_style=MomentStyle.LEVELS_PERIOD2,
            weight_style=WeightStyle.ZWZ_INVERSE,
            draws=draws,
            n_moments=self.Z.shape[1],
            n_parameters=self.X.shape[1] + self.n_sigma,
        )
        self.weight = self.problem.weight(self.Z)
        self.context = f"characteristic IV ({self.iv_kind.value})"
        self._cache = {}

    @property
    def N(self):
        return self.Z.shape[0]

    def inverse_demand(self, sigma, derivative=False):
        key = (tuple(np.atleast_1d(sigma).tolist()), derivative)
        if key not in self._cache:
            self._cache = {key: stacked_inverse_demand(
                self.markets, sigma, self.draws, derivative=derivative, config=self.config
            )}
        return self._cache[key]

    def linear_parameters(self, sigma):
        D, _ = self.inverse_demand(sigma)
        return concentrate_linear(D, self.X, self.Z, self.weight, context=self.context)

    def residuals(self, sigma):
        D, _ = self.inverse_demand(sigma)
        return D - self.X @ concentrate_linear(D, self.X, self.Z, self.weight, context=self.context)

    def moments(self, sigma):
        return self.Z.T @ self.residuals(sigma) / self.N

    def moment_jacobian(self, sigma):
        """Analytic ``d h / d sigma`` with the linear parameters re-concentrated."""
        _, dD = self.inverse_demand(sigma, derivative=True)
        dlinear = concentrate_linear(dD, self.X, self.Z, self.weight, context=self.context)
        return self.Z.T @ (dD - self.X @ dlinear) / self.N

    def objective(self, sigma):
        h = self.moments(sigma)
        return float(h @ self.weight @ h)

    def moment_data(self, sigma):
        D, dD = self.inverse_demand(sigma, derivative=True)
        coefficients = concentrate_linear(D, self.X, self.Z, self.weight, context=self.context)
        names = ["alpha"] + [f"beta{index}" for index in range(self.x.shape[1])]
        names += [f"sigma{index + 1}" for index in range(self.n_sigma)]
        return MomentData(
            Z=self.Z,
            residuals=D - self.X @ coefficients,
            residual_jacobian=np.column_stack([-self.X, dD]),
            weight=self.weight,
            market_index=market_index(self.markets),
            parameter_names=names,
        )


def estimate_char_iv(markets, iv_kind, draws, grid_points=50, grid_upper=10.0, config=None):
    """Grid start, Gauss-Newton in ``softplus`` space, BFGS fallback.

    ``markets`` may be a panel; only its period-2 markets enter the moments.
    """
    started = time.perf_counter()
    markets = getattr(markets, "markets", markets)
    if not markets:
        raise DomainError("characteristic-IV estimation needs period-2 markets")
    problem = CharacteristicIvProblem(markets, iv_kind, draws, config=config)
    label = problem.context

    grid_start, _ = grid_search(problem.objective, n_points=grid_points, dims=problem.n_sigma, upper=grid_upper)
    start = inverse_softplus(np.maximum(grid_start, SIGMA_FLOOR))

    def moments(u):
        return problem.moments(softplus(u))

    def jacobian(u):
        return problem.moment_jacobian(softplus(u)) * softplus_derivative(u)

    point, report, trigger, failure = minimize_with_fallback(moments, jacobian, problem.weight, start, label=label)
    sigma = softplus(point)
    coefficients = problem.linear_parameters(sigma)
    result = EstimationResult(
        estimator=problem.iv_kind.label,
        theta_hat=Theta(alpha=coefficients[0], sigma=sigma),
        beta_hat=coefficients[1:],
        report=report,
        objective_value=problem.objective(sigma),
        grid_start=grid_start,
        mode="concentrated",
        fallback_trigger=trigger,
        failure=failure,
        wall_time=time.perf_counter() - started,
        meta={"n_products": problem.N, "n_markets": len(problem.markets)},
        moments=problem.moment_data(sigma),
    )
    logger.info("%s: alpha %.4f sigma %s (%s)", label, result.theta_hat.alpha, sigma, report.method_used.value)
    return result
