"""Two-period mixed logit markets with single-product Bertrand-Nash pricing.

Characteristics are time invariant within a region; taste and cost shifters follow
stationary AR(1) processes; the observed cost shock is zero in the first period.
Every random ingredient comes from its own seeded substream so that sweeping one
scenario parameter leaves the remaining randomness untouched.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy import optimize

from apps.demand.exceptions import DivergenceError, DomainError, PricingError, ReciVError
from apps.demand.mixedlogit import ConsumerDraws, Market, Theta, choice_probabilities
from apps.demand.solvers import Acceleration, FixedPointConfig, accelerated_fixed_point, substream

logger = logging.getLogger(__name__)

ALPHA_TRUE = -0.2 - 4.0 * np.exp(0.5)
PRICING_TOLERANCE = 1e-10
PRICING_MAX_ITERATIONS = 5000
FOC_TOLERANCE = 1e-8
BLISS_PENALTY = 3.0


# =================================== CONFIGURATION ===================================
class Scenario(Enum):
    BASELINE = "baseline"
    SHOCK_SWEEP = "shock-sweep"
    COMMON_PRODUCTS = "common-products"
    BLISS_POINT = "bliss"


@dataclass(frozen=True)
class DgpConfig:
    n_regions: int = 100
    n_products: int = 15
    n_periods: int = 2
    L1: int = 2
    sigma_true: tuple = (4.0, 4.0)
    alpha_true: float = ALPHA_TRUE
    beta: tuple = (35.0, 2.0, 2.0)
    gamma: tuple = (5.0, 1.0, 1.0)
    ar_coef: float = 0.9
    shock_sd: float = 0.2
    dgp_draws: int = 1000
    seed: int = 0
    scenario: Scenario = Scenario.BASELINE
    common_products: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        object.__setattr__(self, "sigma_true", tuple(float(v) for v in self.sigma_true))
        object.__setattr__(self, "beta", tuple(float(v) for v in self.beta))
        object.__setattr__(self, "gamma", tuple(float(v) for v in self.gamma))
        if self.shock_sd < 0:
            raise DomainError(f"shock_sd must be nonnegative, got {self.shock_sd}")
        if not -1.0 < self.ar_coef < 1.0:
            raise DomainError(f"ar_coef must lie in (-1, 1), got {self.ar_coef}")
        if self.n_regions < 1 or self.n_products < 1 or self.dgp_draws < 1:
            raise DomainError("regions, products and draws must be positive")
        if self.n_periods < 2:
            raise DomainError("the panel needs at least two periods")
        if len(self.sigma_true) != self.L1 or len(self.beta) != self.L1 + 1 or len(self.gamma) != self.L1 + 1:
            raise DomainError(f"sigma needs {self.L1} entries, beta and gamma need {self.L1 + 1}")
        if not 0 <= self.common_products <= self.n_products:
            raise DomainError(f"common products must lie in [0, {self.n_products}], got {self.common_products}")
        if self.common_products and self.scenario is not Scenario.COMMON_PRODUCTS:
            raise DomainError("common products are only used by the common-products scenario")
        if self.alpha_true >= 0:
            raise DomainError("the price coefficient must be negative for pricing to have a solution")

    @property
    def theta(self):
        return Theta(alpha=self.alpha_true, sigma=np.array(self.sigma_true))

    def as_dict(self):
        values = asdict(self)
        values["scenario"] = self.scenario.value
        values["sigma_true"] = list(self.sigma_true)
        values["beta"] = list(self.beta)
        values["gamma"] = list(self.gamma)
        return values

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


# =================================== OUTPUT TYPES ===================================
@dataclass
class DroppedMarket:
    market_id: tuple
    reason: str
    x1: np.ndarray = field(default=None, repr=False)
    g: np.ndarray = field(default=None, repr=False)


@dataclass
class SimulatedPanel:
    markets: list
    dropped_markets: list = field(default_factory=list)
    truth: DgpConfig = None

    def period(self, t):
        return [market for market in self.markets if market.period == t]

    def paired_markets(self, t=2):
        """Period-``t`` markets whose previous period survived pricing."""
        return [market for market in self.period(t) if market.lagged is not None]

    @property
    def n_dropped(self):
        return len(self.dropped_markets)


# =================================== PRICING ===================================
def _pricing_terms(prices, delta_exogenous, theta, x1, draws):
    delta = delta_exogenous + theta.alpha * prices
    inside, _ = choice_probabilities(delta, theta.sigma, x1, draws)
    s = inside.mean(axis=-1)
    lam = theta.alpha * s
    # single-product firms: only own-price terms of Gamma survive the ownership mask
    gam = theta.alpha * (inside**2).mean(axis=-1)
    return s, lam, gam


def foc_residual(prices, costs, delta_exogenous, theta, x1, draws):
    """``p - c + (Lambda - Gamma)^{-1} S`` for single-product firms."""
    s, lam, gam = _pricing_terms(prices, delta_exogenous, theta, x1, draws)
    return prices - costs + s / (lam - gam)


def _zeta_map(prices, costs, delta_exogenous, theta, x1, draws):
    s, lam, gam = _pricing_terms(prices, delta_exogenous, theta, x1, draws)
    return costs + gam * (prices - costs) / lam - s / lam


def _acceptable(prices, costs, delta_exogenous, theta, x1, draws):
    if not np.all(np.isfinite(prices)) or np.any(prices <= costs):
        return False
    residual = foc_residual(prices, costs, delta_exogenous, theta, x1, draws)
    return bool(np.max(np.abs(residual)) <= FOC_TOLERANCE)


def solve_prices(costs, delta_exogenous, theta, x1, draws):
    """Bertrand-Nash prices for one market.

    Iterates the zeta-map ``p <- c + Lambda^{-1} Gamma (p - c) - Lambda^{-1} S``; if its
    fixed point fails the first-order conditions the FOC system is solved directly
    with scipy's hybrid root finder. Raises ``PricingError`` when neither works.
    """
    if theta.alpha >= 0:
        raise DomainError("pricing needs a negative price coefficient")
    costs = np.asarray(costs, dtype=np.float64)
    delta_exogenous = np.asarray(delta_exogenous, dtype=np.float64)
    args = (costs, delta_exogenous, theta, x1, draws)
    start = costs - 1.0 / theta.alpha
    config = FixedPointConfig(
        tolerance=PRICING_TOLERANCE, max_iterations=PRICING_MAX_ITERATIONS, acceleration=Acceleration.SQUAREM
    )
    try:
        prices, report = accelerated_fixed_point(lambda p: _zeta_map(p, *args), start, config)
        if _acceptable(prices, *args):
            logger.debug("zeta-map converged in %d iterations", report.iterations)
            return prices
    except DivergenceError as exc:
        logger.debug("zeta-map diverged: %s", exc)

    logger.info("zeta-map failed the first-order conditions; solving them directly")
    with np.errstate(all="ignore"):
        solution = optimize.root(lambda p: foc_residual(p, *args), start, method="hybr", options={"xtol": 1e-14})
    prices = np.asarray(solution.x, dtype=np.float64)
    if _acceptable(prices, *args):
        return prices
    raise PricingError(f"no equilibrium prices found ({solution.message})")


# =================================== SCENARIOS ===================================
def apply_bliss_point(config, region_bliss, x1, xi):
    """Centre the first characteristic on the region's bliss point and penalize distance from it.

    ``x1`` holds centred draws for the region's products and ``xi`` stacks the taste
    shifters of every period (periods along axis 0). Returns modified copies.
    """
    if config.scenario is not Scenario.BLISS_POINT:
        raise DomainError("the bliss point only applies to the bliss scenario")
    x1 = np.array(x1, dtype=np.float64, copy=True)
    x1[:, 0] += region_bliss
    penalty = BLISS_PENALTY * (x1[:, 0] - region_bliss) ** 2
    return x1, np.asarray(xi, dtype=np.float64) - penalty


def _ar1_paths(rng, config, shape):
    """Stationary AR(1) with unit variance, one row per period."""
    rho = config.ar_coef
    paths = np.empty((config.n_periods,) + shape)
    paths[0] = rng.standard_normal(shape)
    innovation = np.sqrt(1.0 - rho**2)
    for t in range(1, config.n_periods):
        paths[t] = rho * paths[t - 1] + innovation * rng.standard_normal(shape)
    return paths


def draw_characteristics(config):
    """Non-intercept characteristics of shape ``(R, J, L1)``."""
    x1 = substream(config.seed, "characteristics").standard_normal((config.n_regions, config.n_products, config.L1))
    if config.scenario is Scenario.COMMON_PRODUCTS and config.common_products:
        x1[:, : config.common_products] = x1[0, : config.common_products]
    return x1


def draw_shocks(config):
    """Observed cost shocks of shape ``(T, R, J)``, zero in the first period."""
    shape = (config.n_periods, config.n_regions, config.n_products)
    normals = substream(config.seed, "shocks").standard_normal(shape)
    g = config.shock_sd * normals
    g[0] = 0.0
    return g


@dataclass
class _MarketInputs:
    market_id: tuple
    x: np.ndarray
    costs: np.ndarray
    delta_exogenous: np.ndarray
    g: np.ndarray


def _market_inputs(config):
    R, J = config.n_regions, config.n_products
    x1 = draw_characteristics(config)
    xi = _ar1_paths(substream(config.seed, "taste"), config, (R, J))
    omega = _ar1_paths(substream(config.seed, "cost"), config, (R, J))
    g = draw_shocks(config)
    if config.scenario is Scenario.BLISS_POINT:
        bliss = substream(config.seed, "bliss").standard_normal(R)
        for r in range(R):
            x1[r], xi[:, r] = apply_bliss_point(config, bliss[r], x1[r], xi[:, r])

    beta, gamma = np.array(config.beta), np.array(config.gamma)
    inputs = []
    for r in range(R):
        x = np.column_stack([np.ones(J), x1[r]])
        for t in range(config.n_periods):
            inputs.append(
                _MarketInputs(
                    market_id=(r + 1, t + 1),
                    x=x,
                    costs=x @ gamma + omega[t, r] + g[t, r],
                    delta_exogenous=x @ beta + xi[t, r],
                    g=g[t, r],
                )
            )
    return inputs


def _price_market(inputs, theta, draws):
    """Solve one market; returns a ``Market`` or a ``DroppedMarket``."""
    try:
        prices = solve_prices(inputs.costs, inputs.delta_exogenous, theta, inputs.x[:, 1:], draws)
        delta = inputs.delta_exogenous + theta.alpha * prices
        inside, outside = choice_probabilities(delta, theta.sigma, inputs.x[:, 1:], draws)
        return Market(
            market_id=inputs.market_id,
            x=inputs.x,
            x1=inputs.x[:, 1:],
            p=prices,
            s=inside.mean(axis=-1),
            s0=outside.mean(),
            g=inputs.g,
        )
    except ReciVError as exc:
        return DroppedMarket(market_id=inputs.market_id, reason=str(exc), x1=inputs.x[:, 1:], g=inputs.g)


def _price_market_star(args):
    return _price_market(*args)


# =================================== SIMULATION ===================================
def simulate_panel(config, pool=None):
    """Simulate every (region, period) market; failed pricing drops the market, never the panel.

    ``pool`` is an optional ``multiprocessing.Pool`` used to price markets in parallel.
    """
    theta = config.theta
    draws = ConsumerDraws.pseudo_random(
        count=config.dgp_draws, dims=config.L1, seed=config.seed, rng=substream(config.seed, "draws")
    )
    jobs = [(inputs, theta, draws) for inputs in _market_inputs(config)]
    outcomes = pool.map(_price_market_star, jobs) if pool is not None else [_price_market_star(job) for job in jobs]

    markets, dropped = [], []
    for outcome in outcomes:
        (dropped if isinstance(outcome, DroppedMarket) else markets).append(outcome)
    for market_drop in dropped:
        logger.info("dropped market %s: %s", market_drop.market_id, market_drop.reason)
    link_lagged(markets)
    logger.info(
        "simulated %d markets (%d dropped), scenario %s, seed %d",
        len(markets),
        len(dropped),
        config.scenario.value,
        config.seed,
    )
    return SimulatedPanel(markets=markets, dropped_markets=dropped, truth=config)


def link_lagged(markets):
    """Attach each market's previous-period market of the same region as ``lagged``."""
    by_id = {market.market_id: market for market in markets}
    for market in markets:
        market.lagged = by_id.get((market.region, market.period - 1))
    return markets
