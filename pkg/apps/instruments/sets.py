"""Instrument sets: one ``J x K`` matrix per market plus the values used to build them."""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from apps.demand.exceptions import DomainError, MissingLaggedDataError, ShapeMismatchError
from apps.demand.mixedlogit import Theta, group_markets, invert_markets

from .characteristics import GhVariant, blp_sum_iv, gh_differentiation_iv, pooled_characteristic_sd
from .recentered import (
    PermutationScope,
    build_ssiv,
    fiv_prediction,
    recenter_by_permutation,
    shock_deviations,
    shock_permutations,
    ssiv_weights,
)

logger = logging.getLogger(__name__)

DEFAULT_PERMUTATIONS = 20


class InstrumentKind(Enum):
    COST_SHOCK = "cost_shock"
    BLP_SUM = "blp_sum"
    GH_QUADRATIC = "gh_quadratic"
    GH_LOCAL = "gh_local"
    RECIV_SSIV = "reciv_ssiv"
    RECIV_FIV = "reciv_fiv"

    @property
    def recentered(self):
        return self in (InstrumentKind.RECIV_SSIV, InstrumentKind.RECIV_FIV)


@dataclass
class InstrumentSet:
    kind: InstrumentKind
    values: list
    market_ids: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = InstrumentKind(self.kind)
        self.values = [np.atleast_2d(np.asarray(value, dtype=np.float64).T).T for value in self.values]
        if len(self.values) != len(self.market_ids):
            raise ShapeMismatchError("one instrument matrix per market expected")
        widths = {value.shape[1] for value in self.values}
        if len(widths) > 1:
            raise ShapeMismatchError(f"instrument column counts differ across markets: {sorted(widths)}")
        if self.kind.recentered and "recentering" not in self.meta:
            raise DomainError("recentered instrument sets must record their recentering scheme")

    @property
    def n_columns(self):
        return self.values[0].shape[1] if self.values else 0

    def stacked(self):
        return np.vstack(self.values)

    def to_frame(self):
        """Long frame keyed by ``(region, period, product, column)``."""
        frames = []
        for market_id, value in zip(self.market_ids, self.values):
            J, K = value.shape
            frames.append(
                pd.DataFrame(
                    {
                        "region": market_id[0],
                        "period": market_id[1],
                        "product": np.repeat(np.arange(1, J + 1), K),
                        "column": np.tile(np.arange(K), J),
                        "value": value.ravel(),
                    }
                )
            )
        if not frames:
            return pd.DataFrame(columns=["region", "period", "product", "column", "value"])
        return pd.concat(frames, ignore_index=True)


# =================================== RECENTERED BUILDER ===================================
class RecenteredInstruments:
    """Recentered instruments for a fixed panel, rebuilt at any preliminary ``theta``.

    Lagged-share inversions are cached per ``sigma`` and the shock permutations are
    drawn once, so repeated calls inside an optimizer see the same counterfactuals.
    Column 0 is ``-pi * g_tilde``; the remaining columns target ``sigma``.
    """

    def __init__(
        self,
        markets,
        kind,
        draws,
        pi_check,
        permutations=DEFAULT_PERMUTATIONS,
        scope=PermutationScope.ACROSS_ALL,
        seed=0,
        shock_means=None,
        config=None,
    ):
        self.kind = InstrumentKind(kind)
        if not self.kind.recentered:
            raise DomainError(f"{self.kind.value} is not a recentered instrument")
        self.markets = list(markets)
        if any(market.lagged is None for market in self.markets):
            raise MissingLaggedDataError("recentered instruments need every market's lagged period")
        self.draws = draws
        self.pi_check = float(pi_check)
        self.scope = PermutationScope(scope)
        self.seed = seed
        self.shock_means = shock_means if shock_means is not None else [None] * len(self.markets)
        self.config = config
        self.n_permutations = permutations if self.kind is InstrumentKind.RECIV_FIV else 0
        self.permutations = (
            shock_permutations([market.g for market in self.markets], permutations, scope=self.scope, seed=seed)
            if self.kind is InstrumentKind.RECIV_FIV
            else []
        )
        self._lagged = [market.lagged for market in self.markets]
        self._groups = group_markets(self._lagged)
        self._delta_cache = {}

    def lagged_deltas(self, sigma):
        key = tuple(np.atleast_1d(np.asarray(sigma, dtype=np.float64)).tolist())
        if key not in self._delta_cache:
            self._delta_cache = {key: invert_markets(self._lagged, np.array(key), self.draws, self.config)}
        return self._delta_cache[key]

    def _price_column(self, index):
        return -self.pi_check * shock_deviations(self.markets[index], self.shock_means[index])

    def _ssiv(self, theta, deltas):
        values = []
        for index, market in enumerate(self.markets):
            weights = ssiv_weights(market, theta, self.pi_check, self.draws, check_delta=deltas[index])
            values.append(build_ssiv(market, weights, self.pi_check, self.shock_means[index]))
        return values

    def _fiv(self, theta, deltas):
        def predictions(shocks):
            out = [None] * len(self.markets)
            for positions, block in self._groups:
                stacked = fiv_prediction(
                    block,
                    theta,
                    self.pi_check,
                    np.stack([deltas[i] for i in positions]),
                    np.stack([shocks[i] for i in positions]),
                    self.draws,
                )
                for row, index in enumerate(positions):
                    out[index] = stacked[row]
            return out

        actual = [market.g for market in self.markets]
        recentered = recenter_by_permutation(predictions, actual, permutations=self.permutations)
        return [np.column_stack([self._price_column(i), value]) for i, value in enumerate(recentered)]

    def __call__(self, theta):
        deltas = self.lagged_deltas(theta.sigma)
        if self.kind is InstrumentKind.RECIV_SSIV:
            return self._ssiv(theta, deltas)
        return self._fiv(theta, deltas)

    def meta(self, theta):
        return {
            "alpha_check": theta.alpha,
            "sigma_check": theta.sigma.tolist(),
            "pi_check": self.pi_check,
            "permutations": self.n_permutations,
            "recentering": "known shock means" if self.kind is InstrumentKind.RECIV_SSIV else self.scope.value,
            "seed": self.seed,
        }

    def instrument_set(self, theta):
        return InstrumentSet(
            kind=self.kind,
            values=self(theta),
            market_ids=[market.market_id for market in self.markets],
            meta=self.meta(theta),
        )


# =================================== ENTRY POINT ===================================
def build_instrument_set(
    markets,
    kind,
    theta_check=None,
    pi_check=None,
    draws=None,
    permutations=DEFAULT_PERMUTATIONS,
    scope=PermutationScope.ACROSS_ALL,
    seed=0,
    kappa=None,
    shock_means=None,
):
    """Build one instrument set for ``markets``.

    Characteristic kinds return only the columns that target ``sigma``; the
    recentered kinds need ``theta_check``, ``pi_check`` and ``draws``.
    """
    kind = InstrumentKind(kind)
    market_ids = [market.market_id for market in markets]
    if kind is InstrumentKind.COST_SHOCK:
        return InstrumentSet(kind, [market.g[:, None] for market in markets], market_ids)
    if kind is InstrumentKind.BLP_SUM:
        return InstrumentSet(kind, [blp_sum_iv(market) for market in markets], market_ids)
    if kind is InstrumentKind.GH_QUADRATIC:
        return InstrumentSet(
            kind, [gh_differentiation_iv(market, GhVariant.QUADRATIC) for market in markets], market_ids
        )
    if kind is InstrumentKind.GH_LOCAL:
        kappa = pooled_characteristic_sd(markets) if kappa is None else np.atleast_1d(kappa)
        values = [gh_differentiation_iv(market, GhVariant.LOCAL, kappa) for market in markets]
        return InstrumentSet(kind, values, market_ids, meta={"kappa": np.asarray(kappa).tolist()})

    if theta_check is None or pi_check is None or draws is None:
        raise DomainError(f"{kind.value} needs preliminary parameters, a pass-through and consumer draws")
    if not isinstance(theta_check, Theta):
        theta_check = Theta(**theta_check)
    builder = RecenteredInstruments(
        markets,
        kind,
        draws,
        pi_check,
        permutations=permutations,
        scope=scope,
        seed=seed,
        shock_means=shock_means,
    )
    logger.info("building %s instruments for %d markets", kind.value, len(markets))
    return builder.instrument_set(theta_check)
