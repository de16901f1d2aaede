"""Mixed logit shares, their inversion and the derivatives used by the instruments.

The share integral is simulated over a fixed set of consumer draws. Random
coefficients enter only on the non-price characteristics ``x1``; a consumer's
utility for product ``j`` is ``delta_j + sum_l sigma_l * nu_il * x1_jl``.

Kernels that are cheap accept stacked markets with a leading axis (``delta`` of
shape ``(M, J)``, ``x1`` of shape ``(M, J, L1)``). The third-order tensors are
computed one market at a time.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import groupby
from typing import Optional

import numpy as np

from .exceptions import ConditioningError, ConvergenceError, DomainError, ShapeMismatchError
from .solvers import FixedPointConfig, accelerated_fixed_point, halton_draws, normal_inverse_cdf

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-12
CONDITION_LIMIT = 1e12


# =================================== DOMAIN TYPES ===================================
@dataclass
class Market:
    """One (region, period) market.

    ``x`` holds every characteristic with the intercept in column 0; ``x1`` is the
    submatrix carrying random coefficients.
    """

    market_id: tuple
    x: np.ndarray
    x1: np.ndarray
    p: np.ndarray
    s: np.ndarray
    s0: float
    g: np.ndarray
    lagged: Optional["Market"] = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=np.float64))
        self.p = np.asarray(self.p, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        self.s0 = float(self.s0)
        J = self.s.size
        if self.x.shape[0] != J or self.x1.shape[0] != J or self.p.size != J or self.g.size != J:
            raise ShapeMismatchError(f"market {self.market_id}: inconsistent product counts")
        if self.x1.shape[1] > self.x.shape[1]:
            raise ShapeMismatchError(f"market {self.market_id}: more random coefficients than characteristics")
        check_simplex(self.s, self.s0, label=f"market {self.market_id}")

    @property
    def J(self):
        return self.s.size

    @property
    def region(self):
        return self.market_id[0]

    @property
    def period(self):
        return self.market_id[1]


@dataclass
class Theta:
    """Structural parameters.

    ``sigma`` is validated to be nonnegative. The sign of ``alpha`` is enforced
    where it matters (pricing, recentered estimation) rather than here, because a
    concentrated characteristic-IV estimate may come out with either sign.
    """

    alpha: float
    sigma: np.ndarray

    def __post_init__(self):
        self.alpha = float(self.alpha)
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if not np.isfinite(self.alpha) or not np.all(np.isfinite(self.sigma)):
            raise DomainError("theta must be finite")
        if np.any(self.sigma < 0):
            raise DomainError(f"random-coefficient standard deviations must be nonnegative, got {self.sigma}")

    def as_dict(self):
        return {"alpha": self.alpha, "sigma": self.sigma.tolist()}


class DrawSource(Enum):
    SCRAMBLED_HALTON = "scrambled_halton"
    PSEUDO_RANDOM = "pseudo_random"


@dataclass(frozen=True)
class ConsumerDraws:
    nu: np.ndarray
    source: DrawSource
    seed: int = 0

    @classmethod
    def halton(cls, count=250, dims=2, skip=1000, seed=0):
        """Scrambled Halton points mapped through the inverse normal CDF."""
        unit = halton_draws(dims, count, skip=skip, scramble=True, seed=seed)
        return cls(nu=normal_inverse_cdf(unit), source=DrawSource.SCRAMBLED_HALTON, seed=seed)

    @classmethod
    def pseudo_random(cls, count=1000, dims=2, seed=0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        return cls(nu=rng.standard_normal((count, dims)), source=DrawSource.PSEUDO_RANDOM, seed=seed)

    @property
    def count(self):
        return self.nu.shape[0]

    @property
    def dims(self):
        return self.nu.shape[1]

    def symmetrized(self):
        """Antithetic copy: every draw together with its negation."""
        return ConsumerDraws(nu=np.vstack([self.nu, -self.nu]), source=self.source, seed=self.seed)

    def whitened(self):
        """Affine copy with exactly zero sample mean and identity sample covariance."""
        centered = self.nu - self.nu.mean(axis=0)
        covariance = centered.T @ centered / self.count
        factor = np.linalg.cholesky(covariance)
        return ConsumerDraws(nu=np.linalg.solve(factor, centered.T).T, source=self.source, seed=self.seed)


def check_simplex(s, s0, label="market"):
    s = np.asarray(s, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    if np.any(~np.isfinite(s)) or np.any(s <= 0) or np.any(s0 <= 0):
        raise DomainError(f"{label}: shares must be strictly positive")
    if np.any(np.abs(s.sum(axis=-1) + s0 - 1.0) > SIMPLEX_TOLERANCE):
        raise DomainError(f"{label}: inside and outside shares do not sum to one")


# =================================== SHARES ===================================
def choice_probabilities(delta, sigma, x1, draws, collapse_logit=True):
    """Per-draw choice probabilities ``(s_ji, s_0i)`` of shapes ``(..., J, R)`` and ``(..., R)``.

    At ``sigma = 0`` every draw gives the same probabilities, so a single draw is
    used unless ``collapse_logit`` is false.
    """
    delta = np.asarray(delta, dtype=np.float64)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    nu = draws.nu if np.any(sigma) or not collapse_logit else draws.nu[:1]
    mu = np.einsum("...jl,rl->...jr", np.asarray(x1, dtype=np.float64) * sigma, nu)
    utilities = delta[..., :, None] + mu
    shift = np.maximum(utilities.max(axis=-2), 0.0)
    exp_inside = np.exp(utilities - shift[..., None, :])
    exp_outside = np.exp(-shift)
    denominator = exp_outside + exp_inside.sum(axis=-2)
    return exp_inside / denominator[..., None, :], exp_outside / denominator


def shares(delta, sigma, x1, draws):
    inside, _ = choice_probabilities(delta, sigma, x1, draws)
    return inside.mean(axis=-1)


def outside_share(delta, sigma, x1, draws):
    _, outside = choice_probabilities(delta, sigma, x1, draws)
    return outside.mean(axis=-1)


def invert_shares(s, s0, sigma, x1, draws, config=None):
    """Mean utilities reproducing the observed shares (the BLP contraction).

    Starts from ``log(s / s0)`` and iterates ``delta + log s - log S(delta)``.
    Stacked markets are inverted jointly. Raises ``ConvergenceError`` when the
    contraction does not reach the tolerance.
    """
    s = np.asarray(s, dtype=np.float64)
    check_simplex(s, s0)
    start = np.log(s / np.asarray(s0, dtype=np.float64)[..., None])
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if not np.any(sigma):
        return start
    log_s = np.log(s)
    shape = s.shape

    def contraction(flat_delta):
        delta = flat_delta.reshape(shape)
        return (delta + log_s - np.log(shares(delta, sigma, x1, draws))).ravel()

    delta, report = accelerated_fixed_point(contraction, start.ravel(), config or FixedPointConfig())
    if not report.converged:
        raise ConvergenceError(
            "share inversion did not converge", residual=report.final_step_norm, iterations=report.iterations
        )
    logger.debug("share inversion converged in %d iterations", report.iterations)
    return delta.reshape(shape)


# =================================== DERIVATIVES ===================================
def share_jacobian_delta(delta, sigma, x1, draws):
    """``dS_j / d delta_k`` averaged over draws: ``s_j (1[j=k] - s_k)``."""
    inside, _ = choice_probabilities(delta, sigma, x1, draws)
    R = inside.shape[-1]
    jacobian = -np.einsum("...jr,...kr->...jk", inside, inside) / R
    diagonal = inside.mean(axis=-1)
    index = np.arange(diagonal.shape[-1])
    jacobian[..., index, index] += diagonal
    return jacobian


def _share_sigma_terms(inside, x1, nu):
    """Per-draw ``ds_ji / d sigma_l = nu_il s_ji (x1_jl - xbar_il)``, shape ``(..., J, L1, R)``."""
    x1 = np.asarray(x1, dtype=np.float64)
    xbar = np.einsum("...jr,...jl->...lr", inside, x1)
    deviation = x1[..., :, :, None] - xbar[..., None, :, :]
    return inside[..., :, None, :] * deviation * nu.T


def share_dsigma(delta, sigma, x1, draws):
    inside, _ = choice_probabilities(delta, sigma, x1, draws, collapse_logit=False)
    nu = draws.nu
    return _share_sigma_terms(inside, x1, nu).mean(axis=-1)


def _exposure(inside):
    """Per-draw ``A_jk = 1[j=k] - s_k`` of shape ``(J, J, R)``."""
    J = inside.shape[0]
    return np.eye(J)[:, :, None] - inside[None, :, :]


def share_hessian_delta(delta, sigma, x1, draws):
    """Tensor ``T[j, k, k'] = d^2 S_j / d delta_k d delta_k'`` for a single market."""
    inside, _ = choice_probabilities(delta, sigma, x1, draws)
    A = _exposure(inside)
    first = np.einsum("jr,jkr,jmr->jkm", inside, A, A)
    second = np.einsum("jr,kr,kmr->jkm", inside, inside, A)
    return (first - second) / inside.shape[-1]


def share_cross_sigma_delta(delta, sigma, x1, draws):
    """Tensor ``C[l, j, k] = d^2 S_j / d sigma_l d delta_k`` for a single market."""
    inside, _ = choice_probabilities(delta, sigma, x1, draws, collapse_logit=False)
    nu = draws.nu
    d_sigma = _share_sigma_terms(inside, x1, nu)
    A = _exposure(inside)
    first = np.einsum("jlr,jkr->ljk", d_sigma, A)
    second = np.einsum("jr,klr->ljk", inside, d_sigma)
    return (first - second) / inside.shape[-1]


@dataclass
class InversionDerivatives:
    delta: np.ndarray
    jacobian: np.ndarray
    ds: np.ndarray
    dsigma: np.ndarray
    dcross: np.ndarray


def _inverse_jacobian(jacobian, label):
    condition_number = np.linalg.cond(jacobian)
    if not np.isfinite(condition_number) or condition_number > CONDITION_LIMIT:
        raise ConditioningError(
            f"{label}: share jacobian is near singular (condition number {condition_number:.3e})",
            condition_number=condition_number,
        )
    return np.linalg.inv(jacobian)


def inversion_derivatives(market, theta, draws, delta=None, config=None):
    """Derivatives of the inverse demand ``D(s; sigma)`` by the implicit function theorem.

    Returns ``ds = dD/ds'``, ``dsigma = dD/dsigma`` and ``dcross[l] = d^2 D / d sigma_l ds'``.
    ``delta`` can be passed when the market has already been inverted at ``theta``.
    """
    sigma = theta.sigma
    if delta is None:
        delta = invert_shares(market.s, market.s0, sigma, market.x1, draws, config)
    jacobian = share_jacobian_delta(delta, sigma, market.x1, draws)
    ds = _inverse_jacobian(jacobian, f"market {market.market_id}")
    dsigma = -ds @ share_dsigma(delta, sigma, market.x1, draws)
    hessian = share_hessian_delta(delta, sigma, market.x1, draws)
    cross = share_cross_sigma_delta(delta, sigma, market.x1, draws)
    dcross = np.empty_like(cross)
    for ell in range(cross.shape[0]):
        total = np.einsum("jmk,k->jm", hessian, dsigma[:, ell]) + cross[ell]
        dcross[ell] = -ds @ total @ ds
    return InversionDerivatives(delta=delta, jacobian=jacobian, ds=ds, dsigma=dsigma, dcross=dcross)


# =================================== LOCAL-TO-LOGIT APPROXIMATIONS ===================================
def _curvature(s, x1):
    """``a_jl = (x_jl - sum_k s_k x_kl)^2 - (sum_k s_k x_kl)^2``."""
    x1 = np.asarray(x1, dtype=np.float64)
    xbar = np.einsum("...j,...jl->...l", s, x1)
    return (x1 - xbar[..., None, :]) ** 2 - xbar[..., None, :] ** 2


def local_to_logit_inversion(s, s0, x1, sigma):
    s = np.asarray(s, dtype=np.float64)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    logit = np.log(s / np.asarray(s0, dtype=np.float64)[..., None])
    return logit - _curvature(s, x1) @ (sigma**2 / 2.0)


def local_to_logit_shares(delta, x1, sigma):
    """Second-order expansion of the shares around the plain logit."""
    delta = np.asarray(delta, dtype=np.float64)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    x1 = np.asarray(x1, dtype=np.float64)
    shift = np.maximum(delta.max(axis=-1, keepdims=True), 0.0)
    exp_inside = np.exp(delta - shift)
    denominator = np.exp(-shift) + exp_inside.sum(axis=-1, keepdims=True)
    logit = exp_inside / denominator
    xbar = np.einsum("...j,...jl->...l", logit, x1)
    deviation = (x1 - xbar[..., None, :]) ** 2
    spread = np.einsum("...j,...jl->...l", logit, deviation) + (1.0 - logit.sum(axis=-1))[..., None] * xbar**2
    return logit * (1.0 + (deviation - spread[..., None, :]) @ (sigma**2 / 2.0))


# =================================== MARKET BLOCKS ===================================
@dataclass
class MarketBlock:
    """Markets with the same product count stacked along a leading axis."""

    market_ids: list
    x1: np.ndarray
    p: np.ndarray
    s: np.ndarray
    s0: np.ndarray
    g: np.ndarray

    @classmethod
    def from_markets(cls, markets):
        sizes = {market.J for market in markets}
        if len(sizes) != 1:
            raise ShapeMismatchError(f"a market block needs equal product counts, got {sorted(sizes)}")
        return cls(
            market_ids=[market.market_id for market in markets],
            x1=np.stack([market.x1 for market in markets]),
            p=np.stack([market.p for market in markets]),
            s=np.stack([market.s for market in markets]),
            s0=np.array([market.s0 for market in markets]),
            g=np.stack([market.g for market in markets]),
        )

    def __len__(self):
        return len(self.market_ids)


def group_markets(markets):
    """Split markets into blocks of equal size; returns ``(positions, block)`` pairs."""
    ordered = sorted(range(len(markets)), key=lambda index: markets[index].J)
    groups = []
    for _, positions in groupby(ordered, key=lambda index: markets[index].J):
        positions = list(positions)
        groups.append((positions, MarketBlock.from_markets([markets[index] for index in positions])))
    return groups


def invert_block(block, sigma, draws, config=None):
    return invert_shares(block.s, block.s0, sigma, block.x1, draws, config)


def invert_markets(markets, sigma, draws, config=None):
    """Invert every market at ``sigma``; returns one delta vector per market, in order."""
    deltas = [None] * len(markets)
    for positions, block in group_markets(markets):
        block_delta = invert_block(block, sigma, draws, config)
        for row, index in enumerate(positions):
            deltas[index] = block_delta[row]
    return deltas
