"""Nested logit demand and the nested-logit instrument family.

Shares follow the usual inclusive-value algebra: with ``D_n = sum_{k in n} exp(delta_k / (1 - sigma))``
the within-nest share is ``exp(delta_j / (1 - sigma)) / D_n`` and the nest share is
``D_n^(1 - sigma) / (1 + sum_n' D_n'^(1 - sigma))``.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .exceptions import DomainError, MissingLaggedDataError, ShapeMismatchError
from .mixedlogit import Market
from .solvers import linear_gmm

logger = logging.getLogger(__name__)


# =================================== DOMAIN TYPES ===================================
@dataclass
class NestedMarket(Market):
    nest: Optional[np.ndarray] = None
    sigma_nest: Optional[float] = None

    def __post_init__(self):
        super().__post_init__()
        if self.nest is None:
            raise DomainError(f"market {self.market_id}: every product needs a nest label")
        self.nest = np.asarray(self.nest)
        if self.nest.shape != (self.J,):
            raise ShapeMismatchError(f"market {self.market_id}: one nest label per product expected")
        if self.sigma_nest is not None:
            _check_nesting(self.sigma_nest)


def _check_nesting(sigma):
    if not 0.0 <= sigma < 1.0:
        raise DomainError(f"nesting parameter must lie in [0, 1), got {sigma}")


def _nest_index(nest):
    _, index = np.unique(np.asarray(nest), return_inverse=True)
    return index


def _nest_sum(values, index):
    return np.bincount(index, weights=values)[index]


def _nest_logsumexp(values, index):
    totals = np.array([logsumexp(values[index == n]) for n in range(index.max() + 1)])
    return totals[index]


# =================================== SHARES AND INVERSION ===================================
def nested_shares(delta, sigma, nest):
    """Return ``(s, s0)`` for mean utilities ``delta``."""
    _check_nesting(sigma)
    delta = np.asarray(delta, dtype=np.float64)
    index = _nest_index(nest)
    scaled = delta / (1.0 - sigma)
    log_inclusive = np.array([logsumexp(scaled[index == n]) for n in range(index.max() + 1)])
    log_outside = -logsumexp(np.concatenate([[0.0], (1.0 - sigma) * log_inclusive]))
    log_nest_share = (1.0 - sigma) * log_inclusive + log_outside
    log_within = scaled - log_inclusive[index]
    return np.exp(log_within + log_nest_share[index]), float(np.exp(log_outside))


def within_nest_log_shares(s, nest):
    s = np.asarray(s, dtype=np.float64)
    return np.log(s) - np.log(_nest_sum(s, _nest_index(nest)))


def nested_inversion(s, s0, nest, sigma):
    """Mean utilities ``log(s_j / s0) - sigma * log(s_j / s_n(j))``."""
    _check_nesting(sigma)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0) or s0 <= 0:
        raise DomainError("nested inversion needs strictly positive shares")
    return np.log(s / s0) - sigma * within_nest_log_shares(s, nest)


# =================================== INSTRUMENTS ===================================
def iv_relative_shock(market, shocks=None):
    """Own shock minus the unweighted mean shock of the product's nest."""
    g = market.g if shocks is None else np.asarray(shocks, dtype=np.float64)
    index = _nest_index(market.nest)
    counts = np.bincount(index)[index]
    return g - _nest_sum(g, index) / counts


def _require_lagged(market):
    if market.lagged is None:
        raise MissingLaggedDataError(f"market {market.market_id} has no lagged shares")
    return market.lagged


def iv_weighted_shock(market, shocks=None):
    """Own shock minus the lagged-share-weighted mean shock of the product's nest."""
    lagged = _require_lagged(market)
    g = market.g if shocks is None else np.asarray(shocks, dtype=np.float64)
    index = _nest_index(market.nest)
    weights = lagged.s
    return g - _nest_sum(weights * g, index) / _nest_sum(weights, index)


def iv_exact_prediction(market, alpha_check, sigma_check, pi_check, use_lagged=False, shocks=None):
    """Predicted log within-nest shares when prices move by ``pi_check * g``.

    Without lagged data every product starts from the same mean utility; with
    lagged data the prediction updates the pre-period within-nest shares.
    """
    _check_nesting(sigma_check)
    if pi_check == 0:
        raise DomainError("pass-through must be nonzero for an exact prediction")
    g = market.g if shocks is None else np.asarray(shocks, dtype=np.float64)
    if g.shape != (market.J,):
        raise ShapeMismatchError(f"expected {market.J} shocks, got shape {g.shape}")
    index = _nest_index(market.nest)
    kappa = alpha_check * pi_check / (1.0 - sigma_check)
    base = within_nest_log_shares(_require_lagged(market).s, market.nest) if use_lagged else np.zeros(market.J)
    numerator = base + kappa * g
    return numerator - _nest_logsumexp(numerator, index)


def recenter_exact(prediction_fn, market, counterfactual_shocks):
    """Prediction at the realized shocks minus its mean over counterfactual shocks.

    ``prediction_fn`` is called as ``prediction_fn(market, shocks)``.
    """
    if len(counterfactual_shocks) == 0:
        raise DomainError("recentering needs at least one counterfactual")
    actual = np.asarray(prediction_fn(market, market.g), dtype=np.float64)
    predictions = []
    for shocks in counterfactual_shocks:
        shocks = np.asarray(shocks, dtype=np.float64)
        if shocks.shape != market.g.shape:
            raise ShapeMismatchError(f"counterfactual shocks of shape {shocks.shape}, expected {market.g.shape}")
        predictions.append(prediction_fn(market, shocks))
    return actual - np.mean(predictions, axis=0)


def within_market_permutations(market, count, rng):
    return [rng.permutation(market.g) for _ in range(count)]


# =================================== SIMULATION ===================================
@dataclass(frozen=True)
class NestedDgpConfig:
    n_markets: int = 200
    n_nests: int = 3
    max_nest_size: int = 4
    alpha: float = -1.0
    sigma: float = 0.5
    beta0: float = 1.0
    cost_intercept: float = 2.0
    markup: float = 1.0
    ar_coef: float = 0.9
    cost_taste_correlation: float = 0.5
    shock_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        _check_nesting(self.sigma)
        if self.shock_sd < 0 or not -1.0 < self.ar_coef < 1.0:
            raise DomainError("shock_sd must be nonnegative and ar_coef must lie in (-1, 1)")
        if self.n_markets < 1 or self.n_nests < 1 or self.max_nest_size < 1:
            raise DomainError("market, nest and nest-size counts must be positive")


@dataclass
class NestedPanel:
    markets: list
    truth: NestedDgpConfig
    lagged_markets: list = field(default_factory=list)


def _nested_period(config, market_id, nest, xi, omega, g):
    J = nest.size
    price = config.cost_intercept + omega + g + config.markup
    delta = config.beta0 + config.alpha * price + xi
    s, s0 = nested_shares(delta, config.sigma, nest)
    ones = np.ones((J, 1))
    return NestedMarket(
        market_id=market_id,
        x=ones,
        x1=np.zeros((J, 0)),
        p=price,
        s=s,
        s0=s0,
        g=g,
        nest=nest,
        sigma_nest=config.sigma,
    )


def simulate_nested_panel(config):
    """Two-period nested logit panel; period-2 markets carry their period-1 market as ``lagged``.

    Taste shocks and cost shifters follow AR(1) processes with unit stationary variance,
    the cost shifter is correlated with the taste shock, and prices are cost plus a
    constant markup. Observed cost shocks are zero in period 1.
    """
    rng = np.random.default_rng(config.seed)
    rho, corr = config.ar_coef, config.cost_taste_correlation
    innovation = np.sqrt(1.0 - rho**2)
    markets, lagged_markets = [], []
    for m in range(config.n_markets):
        sizes = rng.integers(1, config.max_nest_size + 1, size=config.n_nests)
        nest = np.repeat(np.arange(config.n_nests), sizes)
        J = nest.size
        xi_1 = rng.standard_normal(J)
        xi_2 = rho * xi_1 + innovation * rng.standard_normal(J)
        omega_1 = corr * xi_1 + np.sqrt(1.0 - corr**2) * rng.standard_normal(J)
        omega_2 = corr * xi_2 + np.sqrt(1.0 - corr**2) * rng.standard_normal(J)
        g_2 = config.shock_sd * rng.standard_normal(J)
        before = _nested_period(config, (m, 1), nest, xi_1, omega_1, np.zeros(J))
        after = _nested_period(config, (m, 2), nest, xi_2, omega_2, g_2)
        after.lagged = before
        markets.append(after)
        lagged_markets.append(before)
    logger.info("simulated %d nested logit markets", config.n_markets)
    return NestedPanel(markets=markets, truth=config, lagged_markets=lagged_markets)


# =================================== ESTIMATION ===================================
@dataclass
class NestedEstimate:
    alpha: float
    sigma: float
    intercept: float
    instrument: str
    n_products: int

    def as_dict(self):
        return {
            "alpha": self.alpha,
            "sigma": self.sigma,
            "intercept": self.intercept,
            "instrument": self.instrument,
            "n_products": self.n_products,
        }


def nested_instrument(market, instrument, alpha_check=-1.0, sigma_check=0.5, pi_check=1.0):
    if instrument == "relative":
        return iv_relative_shock(market)
    if instrument == "weighted":
        return iv_weighted_shock(market)
    if instrument == "exact":
        return iv_exact_prediction(market, alpha_check, sigma_check, pi_check, use_lagged=market.lagged is not None)
    raise DomainError(f"unknown nested instrument {instrument!r}")


def estimate_nested_2sls(markets, instrument="relative", **checks):
    """2SLS of ``log(s/s0)`` on ``(1, p, log within-nest share)`` with instruments ``(1, g, z)``."""
    y = np.concatenate([np.log(market.s / market.s0) for market in markets])
    price = np.concatenate([market.p for market in markets])
    within = np.concatenate([within_nest_log_shares(market.s, market.nest) for market in markets])
    g = np.concatenate([market.g for market in markets])
    z = np.concatenate([nested_instrument(market, instrument, **checks) for market in markets])
    ones = np.ones_like(y)
    X = np.column_stack([ones, price, within])
    Z = np.column_stack([ones, g, z])
    intercept, alpha, sigma = linear_gmm(y, X, Z, context=f"nested 2SLS ({instrument})")
    return NestedEstimate(
        alpha=float(alpha),
        sigma=float(sigma),
        intercept=float(intercept),
        instrument=instrument,
        n_products=int(y.size),
    )
