"""Sandwich standard errors, clustered by market or by shock.

Shock-level clustering collapses the shift-share moment onto the shocks: with
``R[k, l] = sum_j w[j, k, l] * resid_j`` in each market, the moment
``sum_j (sum_k w[j, k, l] g_k) resid_j`` equals ``sum_k g_k R[k, l]``, so every
(shock, market) pair contributes one score.
"""

import logging
from enum import Enum

import numpy as np

from apps.demand.exceptions import DomainError, RankDeficiencyError, UnsupportedClusteringError
from apps.instruments.recentered import shock_deviations

logger = logging.getLogger(__name__)


class Clustering(Enum):
    BY_MARKET = "by_market"
    BY_SHOCK = "by_shock"


# =================================== SHOCK AGGREGATION ===================================
def aggregate_shock_residuals(markets, weights, residuals, shock_means=None):
    """Per-market ``R[k, l]`` and the stacked sum ``sum_m sum_k g_km R_km``.

    ``markets`` supply the shocks (recentered by ``shock_means`` when given);
    ``weights`` are ``J x J x L`` arrays and ``residuals`` length-``J`` vectors.
    """
    markets = getattr(markets, "markets", markets)
    means = shock_means if shock_means is not None else [None] * len(markets)
    aggregated = [np.einsum("jkl,j->kl", w, np.asarray(r, dtype=np.float64)) for w, r in zip(weights, residuals)]
    shocks = [shock_deviations(market, mean) for market, mean in zip(markets, means)]
    total = sum(g @ R for g, R in zip(shocks, aggregated))
    return aggregated, total


def check_aggregation_identity(markets, weights, residuals, shock_means=None):
    """Largest gap between the product-level and the shock-level form of the moment sum."""
    markets = getattr(markets, "markets", markets)
    means = shock_means if shock_means is not None else [None] * len(markets)
    direct = sum(
        np.einsum("jkl,k->jl", w, shock_deviations(market, mean)).T @ np.asarray(r, dtype=np.float64)
        for market, mean, w, r in zip(markets, means, weights, residuals)
    )
    _, reordered = aggregate_shock_residuals(markets, weights, residuals, shock_means)
    return float(np.max(np.abs(direct - reordered)))


# =================================== SANDWICH ===================================
def sandwich_covariance(G, weight, cluster_scores, n_observations):
    """``(G'WG)^-1 G'W Omega W G (G'WG)^-1 / N`` with ``Omega = sum_c s_c s_c' / N``."""
    G = np.atleast_2d(G)
    cluster_scores = np.atleast_2d(cluster_scores)
    n_parameters = G.shape[1]
    if cluster_scores.shape[0] < n_parameters:
        raise UnsupportedClusteringError(
            f"{cluster_scores.shape[0]} clusters cannot support {n_parameters} parameters"
        )
    omega = cluster_scores.T @ cluster_scores / n_observations
    bread = G.T @ weight @ G
    if np.linalg.matrix_rank(bread) < n_parameters:
        raise RankDeficiencyError("G'WG is singular; standard errors are not identified", context="sandwich")
    bread_inverse = np.linalg.inv(bread)
    meat = G.T @ weight @ omega @ weight @ G
    return bread_inverse @ meat @ bread_inverse / n_observations


def _market_scores(data):
    scores = data.Z * data.residuals[:, None]
    clusters = np.unique(data.market_index)
    summed = np.zeros((clusters.size, scores.shape[1]))
    np.add.at(summed, np.searchsorted(clusters, data.market_index), scores)
    return summed


def _shock_scores(data):
    ssiv = data.ssiv
    rows = []
    for position, (w, g) in enumerate(zip(ssiv["weights"], ssiv["shocks"])):
        residual = data.residuals[data.market_index == position]
        aggregated = np.einsum("jkl,j->kl", w, residual)
        rows.append(np.column_stack([-ssiv["pi_check"] * g * residual, g[:, None] * aggregated]))
    return np.vstack(rows)


def gmm_standard_errors(result, clustering=Clustering.BY_MARKET):
    """Standard errors for ``result`` keyed by parameter name; also stored on the result.

    Instruments are held at their estimated values. ``by_shock`` needs shift-share weights
    and treats every (shock, market) pair as a cluster.
    """
    clustering = Clustering(clustering)
    data = result.moments
    if data is None:
        raise DomainError(f"{result.estimator} carries no moment data for inference")
    N = data.Z.shape[0]
    G = data.Z.T @ data.residual_jacobian / N
    if clustering is Clustering.BY_SHOCK:
        if data.ssiv is None:
            raise UnsupportedClusteringError(f"{result.estimator} has no shift-share weights to cluster by shock")
        scores = _shock_scores(data)
    else:
        scores = _market_scores(data)
    covariance = sandwich_covariance(G, data.weight, scores, N)
    se = dict(zip(data.parameter_names, np.sqrt(np.clip(np.diag(covariance), 0.0, None)).tolist()))
    result.se = se
    result.clustering = clustering.value
    logger.debug("%s standard errors (%s): %s", result.estimator, clustering.value, se)
    return se
