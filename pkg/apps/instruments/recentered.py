"""Recentered instruments built from exogenous cost shocks.

The shift-share instrument is the first-order prediction of how the shocks move
``d D / d sigma``; the formula instrument is the exact prediction, recentered by
averaging it over permuted shocks. Both only need the shocks to be as-good-as
randomly assigned given characteristics and lagged market outcomes.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from apps.demand.exceptions import (
    ConditioningError,
    DegenerateRegressorError,
    DomainError,
    MissingLaggedDataError,
    ShapeMismatchError,
)
from apps.demand.mixedlogit import CONDITION_LIMIT, inversion_derivatives, share_dsigma, share_jacobian_delta
from apps.demand.solvers import substream

logger = logging.getLogger(__name__)


class PermutationScope(Enum):
    WITHIN_MARKET = "within_market"
    ACROSS_ALL = "across_all"


# =================================== PASS-THROUGH ===================================
@dataclass
class PassThrough:
    pi_check: float
    intercept: float
    fitted_on: str = ""

    def __post_init__(self):
        self.pi_check = float(self.pi_check)
        self.intercept = float(self.intercept)
        if not np.isfinite(self.pi_check):
            raise DomainError("pass-through coefficient must be finite")


def _require_lagged(market):
    if market.lagged is None:
        raise MissingLaggedDataError(f"market {market.market_id} has no lagged period")
    return market.lagged


def shock_deviations(market, shock_means=None):
    """``g - E[g | x, q]`` with the conditional mean taken as known (zero by default)."""
    if shock_means is None:
        return market.g
    shock_means = np.asarray(shock_means, dtype=np.float64)
    if shock_means.shape != market.g.shape:
        raise ShapeMismatchError(f"market {market.market_id}: shock means of shape {shock_means.shape}")
    return market.g - shock_means


def estimate_pass_through(panel, shock_means=None):
    """OLS slope (with intercept) of first-differenced prices on recentered shocks.

    ``panel`` is a panel or a list of markets; markets without a lagged period are
    skipped. ``shock_means`` is an optional list aligned with the paired markets.
    """
    markets = [market for market in getattr(panel, "markets", panel) if market.lagged is not None]
    if not markets:
        raise MissingLaggedDataError("pass-through needs markets with a lagged period")
    means = shock_means if shock_means is not None else [None] * len(markets)
    price_changes = np.concatenate([market.p - market.lagged.p for market in markets])
    shocks = np.concatenate([shock_deviations(market, mean) for market, mean in zip(markets, means)])
    if shocks.size < 2 or np.ptp(shocks) == 0:
        raise DegenerateRegressorError("cost shocks have no variation; pass-through is not identified")
    design = np.column_stack([np.ones_like(shocks), shocks])
    (intercept, slope), *_ = np.linalg.lstsq(design, price_changes, rcond=None)
    logger.info("pass-through %.4f from %d products", slope, shocks.size)
    return PassThrough(
        pi_check=slope,
        intercept=intercept,
        fitted_on=f"price changes on cost shocks, {shocks.size} products in {len(markets)} markets",
    )


# =================================== SHIFT-SHARE ===================================
def ssiv_weights(market, theta_check, pi_check, draws, check_delta=None, config=None):
    """Exposure weights ``w[j, k, l]`` evaluated at the market's lagged shares.

    ``w[j, k, l] = alpha * pi * sum_k' d^2 D_j / d s_k' d sigma_l * d S_k' / d delta_k``.
    The realized shocks of ``market`` are never read.
    """
    lagged = _require_lagged(market)
    derivatives = inversion_derivatives(lagged, theta_check, draws, delta=check_delta, config=config)
    scale = theta_check.alpha * pi_check
    return scale * np.einsum("ljm,mk->jkl", derivatives.dcross, derivatives.jacobian)


def build_ssiv(market, weights, pi_check, shock_means=None):
    """Columns ``(-pi * g_tilde, sum_k w[j, k, l] g_tilde_k for each l)``."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[:2] != (market.J, market.J):
        raise ShapeMismatchError(f"market {market.market_id}: weights of shape {weights.shape}")
    g_tilde = shock_deviations(market, shock_means)
    shift_share = np.einsum("jkl,k->jl", weights, g_tilde)
    return np.column_stack([-pi_check * g_tilde, shift_share])


def local_to_logit_ssiv(s_check, x1, alpha_check, pi_check, sigma_check, shocks):
    """Closed form of the shift-share columns for small ``sigma_check``.

    ``2 alpha pi sigma_l x_jl sum_k s_k (x_kl - xbar_l) g_k`` with ``xbar = sum_k s_k x_k``.
    """
    s_check = np.asarray(s_check, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    shocks = np.asarray(shocks, dtype=np.float64)
    sigma_check = np.atleast_1d(np.asarray(sigma_check, dtype=np.float64))
    xbar = s_check @ x1
    covariance = (s_check * shocks) @ (x1 - xbar)
    return 2.0 * alpha_check * pi_check * sigma_check * x1 * covariance


def local_to_logit_price_ssiv(p_check, s_check, shocks, alpha_check, pi_check, sigma_price):
    """Small-``sigma_price`` shift-share column for a random coefficient on price.

    Not used by the estimators, which carry no price random coefficient.
    """
    p_check = np.asarray(p_check, dtype=np.float64)
    s_check = np.asarray(s_check, dtype=np.float64)
    shocks = np.asarray(shocks, dtype=np.float64)
    pbar = s_check @ p_check
    own = 2.0 * sigma_price * pi_check * (p_check - pbar) * shocks
    competitors = -2.0 * sigma_price * pi_check * p_check * (s_check @ shocks)
    reallocation = 2.0 * alpha_check * pi_check * sigma_price * p_check * (s_check * (p_check - pbar)) @ shocks
    return own + competitors + reallocation


# =================================== FORMULA IV ===================================
def dsigma_inverse_demand(delta, sigma, x1, draws):
    """``d D / d sigma`` at the shares implied by ``delta``; stacked markets allowed."""
    jacobian = share_jacobian_delta(delta, sigma, x1, draws)
    condition_number = np.atleast_1d(np.linalg.cond(jacobian))
    if np.any(~np.isfinite(condition_number)) or np.any(condition_number > CONDITION_LIMIT):
        raise ConditioningError(
            "share jacobian is near singular in the formula prediction", condition_number=float(condition_number.max())
        )
    return -np.linalg.solve(jacobian, share_dsigma(delta, sigma, x1, draws))


def fiv_prediction(market, theta_check, pi_check, lagged_delta, shocks, draws):
    """Exact prediction of ``d D / d sigma`` after mean utilities move by ``alpha * pi * shocks``.

    ``market`` may be a single market or a ``MarketBlock`` with stacked ``lagged_delta``
    and ``shocks``.
    """
    lagged_delta = np.asarray(lagged_delta, dtype=np.float64)
    shocks = np.asarray(shocks, dtype=np.float64)
    if lagged_delta.shape != shocks.shape:
        raise ShapeMismatchError(f"lagged utilities {lagged_delta.shape} and shocks {shocks.shape} differ")
    delta = lagged_delta + theta_check.alpha * pi_check * shocks
    return dsigma_inverse_demand(delta, theta_check.sigma, market.x1, draws)


# =================================== PERMUTATION RECENTERING ===================================
def shock_permutations(actual, count, scope=PermutationScope.ACROSS_ALL, seed=0, rng=None):
    """``count`` counterfactual shock assignments, each a list aligned with ``actual``.

    Without ``rng`` the draws come from the "permutations" substream of ``seed``.
    """
    scope = PermutationScope(scope)
    if count < 1:
        raise DomainError(f"need at least one permutation, got {count}")
    rng = rng if rng is not None else substream(seed, "permutations")
    actual = [np.asarray(shocks, dtype=np.float64) for shocks in actual]
    if scope is PermutationScope.WITHIN_MARKET:
        return [[rng.permutation(shocks) for shocks in actual] for _ in range(count)]
    pooled = np.concatenate(actual)
    splits = np.cumsum([shocks.size for shocks in actual])[:-1]
    return [np.split(rng.permutation(pooled), splits) for _ in range(count)]


def recenter_by_permutation(values_fn, actual, count=20, scope=PermutationScope.ACROSS_ALL, seed=0, permutations=None):
    """``values_fn(actual)`` minus its average over permuted shocks.

    ``values_fn`` maps a list of per-market shock vectors to a list of per-market
    matrices. Pass ``permutations`` to reuse a frozen set of counterfactuals.
    """
    if permutations is None:
        permutations = shock_permutations(actual, count, scope=scope, seed=seed)
    if len(permutations) == 0:
        raise DomainError("recentering needs at least one counterfactual")
    realized = [np.asarray(value, dtype=np.float64) for value in values_fn(actual)]
    totals = [np.zeros_like(value) for value in realized]
    for shocks in permutations:
        for total, value in zip(totals, values_fn(shocks)):
            total += value
    return [value - total / len(permutations) for value, total in zip(realized, totals)]
