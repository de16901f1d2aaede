"""Characteristic-based instruments: BLP sums and differentiation IVs."""

from enum import Enum

import numpy as np

from apps.demand.exceptions import DomainError, ShapeMismatchError


class GhVariant(Enum):
    QUADRATIC = "quadratic"
    LOCAL = "local"


def blp_sum_iv(market):
    """Sum of competitors' characteristics, ``sum_{k != j} x_kl``; zeros for a single product."""
    x1 = np.asarray(market.x1, dtype=np.float64)
    return x1.sum(axis=0, keepdims=True) - x1


def gh_differentiation_iv(market, variant, kappa=None):
    """Differentiation IVs.

    ``quadratic``: ``sum_k (x_jl - x_kl)^2``.
    ``local``: number of competitors with ``|x_jl - x_kl| < kappa_l`` (strict inequality).
    """
    variant = GhVariant(variant)
    x1 = np.asarray(market.x1, dtype=np.float64)
    distance = x1[:, None, :] - x1[None, :, :]
    if variant is GhVariant.QUADRATIC:
        return (distance**2).sum(axis=1)

    if kappa is None:
        raise DomainError("the local differentiation IV needs a proximity threshold")
    kappa = np.atleast_1d(np.asarray(kappa, dtype=np.float64))
    if kappa.shape != (x1.shape[1],):
        raise ShapeMismatchError(f"one threshold per characteristic expected, got shape {kappa.shape}")
    if np.any(kappa <= 0):
        raise DomainError(f"proximity thresholds must be positive, got {kappa}")
    close = np.abs(distance) < kappa
    # a product is always within kappa of itself
    return close.sum(axis=1).astype(np.float64) - 1.0


def pooled_characteristic_sd(markets):
    """Sample standard deviation of each characteristic over all products and markets."""
    stacked = np.vstack([market.x1 for market in markets])
    if stacked.shape[0] < 2:
        raise DomainError("need at least two products to compute a standard deviation")
    return stacked.std(axis=0, ddof=1)
