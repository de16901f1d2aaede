"""Numerical kernels shared by the demand, instrument and estimation apps.

Low-discrepancy sequences, the accelerated fixed-point iteration used for share
inversion and pricing, the Gauss-Newton / BFGS minimizers and central finite
differences all live here. Nothing in this module touches Django.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import optimize, special

from .exceptions import (
    DivergenceError,
    DomainError,
    NonFiniteEvaluationError,
    RankDeficiencyError,
    UnsupportedDimensionError,
)

logger = logging.getLogger(__name__)

# =================================== TOLERANCES ===================================
MACHINE_EPSILON = float(np.finfo(np.float64).eps)
INVERSION_TOLERANCE = MACHINE_EPSILON ** (5 / 6)
STEP_TOLERANCE = MACHINE_EPSILON ** (1 / 2)
# Applied to the gradient H'Wh of Q = h'Wh / 2, in whatever coordinates the optimizer works in.
GRADIENT_TOLERANCE = MACHINE_EPSILON ** (1 / 3)
MAX_CONDITION_NUMBER = 1.0 / MACHINE_EPSILON

HALTON_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53)

# Offsets appended to the master seed; one substream per random ingredient.
STREAMS = {
    "characteristics": 0,
    "bliss": 1,
    "taste": 2,
    "cost": 3,
    "shocks": 4,
    "draws": 5,
    "permutations": 6,
}


class Acceleration(Enum):
    PLAIN = "plain"
    SQUAREM = "squarem"


class OptimizerMethod(Enum):
    GAUSS_NEWTON = "gauss_newton"
    QUASI_NEWTON_FALLBACK = "quasi_newton_fallback"
    FIXED_POINT = "fixed_point"


@dataclass(frozen=True)
class FixedPointConfig:
    tolerance: float = INVERSION_TOLERANCE
    max_iterations: int = 10_000
    acceleration: Acceleration = Acceleration.SQUAREM

    def __post_init__(self):
        if not self.tolerance > 0:
            raise DomainError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise DomainError(f"max_iterations must be at least 1, got {self.max_iterations}")


@dataclass
class OptimizerReport:
    converged: bool
    iterations: int
    final_step_norm: float
    final_gradient_norm: float
    objective: float
    method_used: OptimizerMethod

    def as_dict(self):
        return {
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "final_step_norm": float(self.final_step_norm),
            "final_gradient_norm": float(self.final_gradient_norm),
            "objective": float(self.objective),
            "method_used": self.method_used.value,
        }


def substream(seed, name):
    """Generator for one named ingredient of the replication seeded by ``seed``."""
    return np.random.default_rng([int(seed), STREAMS[name]])


# =================================== LOW-DISCREPANCY SEQUENCES ===================================
def reverse_radix_permutation(base):
    """Digit permutation of the reverse-radix (RR2) scrambling for ``base``.

    The bit-reversed ordering of ``0 .. 2**m - 1`` (smallest ``2**m >= base``) is
    filtered down to the values below ``base``. Zero always maps to zero.
    """
    bits = max(1, int(np.ceil(np.log2(base))))
    reversed_values = [int(format(value, f"0{bits}b")[::-1], 2) for value in range(2**bits)]
    return np.array([value for value in reversed_values if value < base], dtype=np.int64)


def digit_permutation(base, seed=0):
    """Scrambling permutation for ``base``: RR2 for seed 0, a seeded shuffle of the nonzero digits otherwise."""
    if seed == 0:
        return reverse_radix_permutation(base)
    shuffled = np.random.default_rng([int(seed), base]).permutation(np.arange(1, base, dtype=np.int64))
    return np.concatenate([[0], shuffled]).astype(np.int64)


def _radical_inverse(indices, base, permutation=None):
    remaining = indices.copy()
    values = np.zeros(indices.shape, dtype=np.float64)
    factor = 1.0 / base
    while np.any(remaining > 0):
        digits = remaining % base
        if permutation is not None:
            digits = permutation[digits]
        values += digits * factor
        remaining //= base
        factor /= base
    return values


def halton_draws(dims, count, skip=0, scramble=True, seed=0):
    """Halton points for indices ``skip + 1 .. skip + count``.

    Parameters
    ----------
    dims : int
        Number of coordinates, one prime base each.
    count : int
        Number of points.
    skip : int
        Number of leading points discarded.
    scramble : bool
        Apply reverse-radix digit scrambling.
    seed : int
        Picks the digit permutations. Seed 0 gives the reverse-radix (RR2)
        scrambling; any other seed shuffles the nonzero digits of each base.

    Returns
    -------
    numpy.ndarray
        ``count x dims`` array with entries strictly inside (0, 1).
    """
    if dims < 1 or count < 1 or skip < 0:
        raise DomainError(f"invalid Halton request dims={dims} count={count} skip={skip}")
    if dims > len(HALTON_PRIMES):
        raise UnsupportedDimensionError(
            f"Halton draws support at most {len(HALTON_PRIMES)} dimensions, got {dims}"
        )
    indices = np.arange(skip + 1, skip + count + 1, dtype=np.int64)
    columns = []
    for base in HALTON_PRIMES[:dims]:
        permutation = digit_permutation(base, seed) if scramble else None
        columns.append(_radical_inverse(indices, base, permutation))
    return np.column_stack(columns)


def normal_inverse_cdf(u):
    values = np.asarray(u, dtype=np.float64)
    if np.any(~np.isfinite(values)) or np.any(values <= 0) or np.any(values >= 1):
        raise DomainError("normal_inverse_cdf is defined on the open interval (0, 1)")
    result = special.ndtri(values)
    return float(result) if result.ndim == 0 else result


def generalized_golden_ratio(dims):
    """Unique positive root of ``x**(dims + 1) = x + 1``."""
    x = 2.0
    for _ in range(64):
        x = (1.0 + x) ** (1.0 / (dims + 1))
    return x


def rd_grid(n_points, dims, lower, upper):
    lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), (dims,))
    upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), (dims,))
    if n_points < 1 or dims < 1:
        raise DomainError(f"rd_grid needs positive sizes, got n_points={n_points} dims={dims}")
    if np.any(upper <= lower):
        raise DomainError("rd_grid box is degenerate: every lower bound must be below its upper bound")
    ratio = generalized_golden_ratio(dims)
    alpha = (1.0 / ratio) ** np.arange(1, dims + 1) % 1.0
    steps = np.arange(1, n_points + 1, dtype=np.float64)[:, None]
    unit = (0.5 + alpha[None, :] * steps) % 1.0
    return lower + unit * (upper - lower)


# =================================== FIXED POINTS ===================================
def _evaluate_map(map_fn, x):
    value = np.asarray(map_fn(x), dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise DivergenceError("fixed-point map returned a non-finite value", last_iterate=x.copy())
    return value


def _squarem_step(map_fn, x, x1, residual):
    """One squared-extrapolation step, safeguarded by a plain double step."""
    r = x1 - x
    x2 = _evaluate_map(map_fn, x1)
    v = (x2 - x1) - r
    v_norm = np.linalg.norm(v)
    if v_norm == 0:
        return x2
    step = min(-np.linalg.norm(r) / v_norm, -1.0)
    extrapolated = x - 2.0 * step * r + step**2 * v
    if not np.all(np.isfinite(extrapolated)):
        return x2
    try:
        stabilized = _evaluate_map(map_fn, extrapolated)
    except DivergenceError:
        return x2
    if np.max(np.abs(stabilized - extrapolated)) > residual:
        return x2
    return stabilized


def accelerated_fixed_point(map_fn, start, config=None):
    """Iterate ``x <- map_fn(x)`` until the sup-norm update is within tolerance.

    Returns the last iterate ``x`` (for which ``|map_fn(x) - x|`` was checked) and an
    ``OptimizerReport``. A non-finite map value raises ``DivergenceError``.
    """
    config = config or FixedPointConfig()
    x = np.array(start, dtype=np.float64, copy=True)
    residual = np.inf
    iterations = 0
    while True:
        x1 = _evaluate_map(map_fn, x)
        residual = float(np.max(np.abs(x1 - x))) if x.size else 0.0
        if residual <= config.tolerance or iterations >= config.max_iterations:
            break
        if config.acceleration is Acceleration.SQUAREM:
            x = _squarem_step(map_fn, x, x1, residual)
        else:
            x = x1
        iterations += 1

    converged = residual <= config.tolerance
    if not converged:
        logger.warning("fixed point not reached after %d iterations (residual %.3e)", iterations, residual)
    report = OptimizerReport(
        converged=converged,
        iterations=iterations,
        final_step_norm=residual,
        final_gradient_norm=0.0,
        objective=residual,
        method_used=OptimizerMethod.FIXED_POINT,
    )
    return x, report


# =================================== MINIMIZERS ===================================
def _well_conditioned(matrix):
    if not np.all(np.isfinite(matrix)):
        return False
    condition_number = np.linalg.cond(matrix)
    return bool(np.isfinite(condition_number) and condition_number <= MAX_CONDITION_NUMBER)


def _gauss_newton_step(h, H, weight):
    normal = H.T @ weight @ H
    if not _well_conditioned(normal):
        raise RankDeficiencyError(
            "H'WH is singular; the moment jacobian lacks full column rank", context="gauss_newton"
        )
    return -np.linalg.solve(normal, H.T @ weight @ h)


def gauss_newton(moments, jacobian, weight, start, step_tol=STEP_TOLERANCE, max_iter=100):
    """Gauss-Newton regression ``b = -(H'WH)^{-1} H'W h`` until ``|b| <= step_tol``.

    ``report.iterations`` counts the steps actually taken, so a linear moment
    system reports one iteration.
    """
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    theta = np.atleast_1d(np.array(start, dtype=np.float64, copy=True))
    iterations = 0
    step_norm = np.inf
    converged = False
    for _ in range(max_iter + 1):
        h = np.atleast_1d(np.asarray(moments(theta), dtype=np.float64))
        H = np.atleast_2d(np.asarray(jacobian(theta), dtype=np.float64)).reshape(h.size, theta.size)
        step = _gauss_newton_step(h, H, weight)
        step_norm = float(np.linalg.norm(step))
        if step_norm <= step_tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        theta = theta + step
        iterations += 1

    h = np.atleast_1d(np.asarray(moments(theta), dtype=np.float64))
    H = np.atleast_2d(np.asarray(jacobian(theta), dtype=np.float64)).reshape(h.size, theta.size)
    logger.debug("gauss-newton finished after %d steps (|b| = %.3e)", iterations, step_norm)
    report = OptimizerReport(
        converged=converged,
        iterations=iterations,
        final_step_norm=step_norm,
        final_gradient_norm=float(np.linalg.norm(H.T @ weight @ h)),
        objective=float(h @ weight @ h),
        method_used=OptimizerMethod.GAUSS_NEWTON,
    )
    return theta, report


def quasi_newton(objective, start, grad_tol=GRADIENT_TOLERANCE, max_iter=1000):
    """BFGS with central-difference gradients (scipy)."""
    start = np.atleast_1d(np.asarray(start, dtype=np.float64))
    if not np.isfinite(objective(start)):
        raise NonFiniteEvaluationError("objective is not finite at the starting point")
    path = {"previous": start.copy(), "step": 0.0}

    def record_step(xk, *args):
        path["step"] = float(np.linalg.norm(xk - path["previous"]))
        path["previous"] = np.array(xk, copy=True)

    result = optimize.minimize(
        objective,
        start,
        method="BFGS",
        jac="3-point",
        callback=record_step,
        options={"gtol": grad_tol, "maxiter": max_iter},
    )
    theta = np.atleast_1d(result.x)
    gradient_norm = float(np.linalg.norm(finite_difference_gradient(objective, theta)))
    converged = bool(result.success) or gradient_norm <= grad_tol
    if not converged:
        logger.warning("BFGS stopped without convergence: %s", result.message)
    report = OptimizerReport(
        converged=converged,
        iterations=int(result.nit),
        final_step_norm=path["step"],
        final_gradient_norm=gradient_norm,
        objective=float(result.fun),
        method_used=OptimizerMethod.QUASI_NEWTON_FALLBACK,
    )
    return theta, report


# =================================== FINITE DIFFERENCES ===================================
def finite_difference_jacobian(f, x, step_rule="central", relative_step=None):
    """Central-difference jacobian with ``h_i = cbrt(eps) * max(1, |x_i|)``.

    ``relative_step`` replaces ``cbrt(eps)`` when given.
    """
    if step_rule != "central":
        raise DomainError(f"unsupported step rule {step_rule!r}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    base = np.cbrt(MACHINE_EPSILON) if relative_step is None else relative_step
    columns = []
    for i in range(x.size):
        h = base * max(1.0, abs(x[i]))
        upper, lower = x.copy(), x.copy()
        upper[i] += h
        lower[i] -= h
        f_upper = np.atleast_1d(np.asarray(f(upper), dtype=np.float64))
        f_lower = np.atleast_1d(np.asarray(f(lower), dtype=np.float64))
        if not (np.all(np.isfinite(f_upper)) and np.all(np.isfinite(f_lower))):
            raise NonFiniteEvaluationError(f"non-finite evaluation when perturbing coordinate {i}", coordinate=i)
        columns.append((f_upper - f_lower) / (upper[i] - lower[i]))
    return np.column_stack(columns)


def finite_difference_gradient(f, x, relative_step=None):
    return finite_difference_jacobian(lambda z: np.atleast_1d(f(z)), x, relative_step=relative_step)[0]


# =================================== LINEAR GMM ===================================
def linear_gmm(y, X, Z, weight=None, context="linear GMM"):
    """Closed-form linear IV-GMM ``b = (X'Z W Z'X)^{-1} X'Z W Z'y``.

    ``weight`` defaults to ``(Z'Z / N)^{-1}`` (two-stage least squares).
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64).T).T
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64).T).T
    if weight is None:
        cross = Z.T @ Z / Z.shape[0]
        if not _well_conditioned(cross):
            raise RankDeficiencyError(f"instrument cross-product is singular in {context}", context=context)
        weight = np.linalg.inv(cross)
    XZ = X.T @ Z
    normal = XZ @ weight @ XZ.T
    if not _well_conditioned(normal):
        raise RankDeficiencyError(f"X'ZWZ'X is singular in {context}", context=context)
    return np.linalg.solve(normal, XZ @ weight @ (Z.T @ y))
