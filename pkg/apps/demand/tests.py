import math

import numpy as np
from django.test import SimpleTestCase, tag
from scipy import special

from .exceptions import (
    ConditioningError,
    DivergenceError,
    DomainError,
    MissingLaggedDataError,
    NonFiniteEvaluationError,
    RankDeficiencyError,
    ShapeMismatchError,
    UnsupportedDimensionError,
)
from .mixedlogit import (
    ConsumerDraws,
    DrawSource,
    Market,
    Theta,
    invert_markets,
    invert_shares,
    inversion_derivatives,
    local_to_logit_inversion,
    local_to_logit_shares,
    outside_share,
    share_cross_sigma_delta,
    share_dsigma,
    share_hessian_delta,
    share_jacobian_delta,
    shares,
)
from .nestedlogit import (
    NestedDgpConfig,
    NestedMarket,
    estimate_nested_2sls,
    iv_exact_prediction,
    iv_relative_shock,
    iv_weighted_shock,
    nested_inversion,
    nested_shares,
    recenter_exact,
    simulate_nested_panel,
    within_market_permutations,
    within_nest_log_shares,
)
from .solvers import (
    Acceleration,
    FixedPointConfig,
    OptimizerMethod,
    accelerated_fixed_point,
    digit_permutation,
    finite_difference_jacobian,
    gauss_newton,
    halton_draws,
    linear_gmm,
    normal_inverse_cdf,
    quasi_newton,
    rd_grid,
    reverse_radix_permutation,
)


def random_market_inputs(rng, J, L1=2):
    delta = rng.standard_normal(J)
    x1 = rng.standard_normal((J, L1))
    return delta, x1


def make_market(delta, sigma, x1, draws, market_id=(1, 2)):
    s = shares(delta, sigma, x1, draws)
    J = s.size
    x = np.column_stack([np.ones(J), x1])
    return Market(
        market_id=market_id,
        x=x,
        x1=x1,
        p=np.ones(J),
        s=s,
        s0=1.0 - s.sum(),
        g=np.zeros(J),
    )


# =================================== SOLVERS ===================================
class HaltonDrawsTest(SimpleTestCase):
    def test_unscrambled_base_two(self):
        np.testing.assert_allclose(halton_draws(1, 3, 0, scramble=False)[:, 0], [0.5, 0.25, 0.75])

    def test_unscrambled_first_point(self):
        np.testing.assert_allclose(halton_draws(2, 1, 0, scramble=False)[0], [0.5, 1 / 3])

    def test_skip_starts_at_later_index(self):
        full = halton_draws(2, 20, 0, scramble=False)
        skipped = halton_draws(2, 10, 10, scramble=False)
        np.testing.assert_array_equal(full[10:], skipped)

    def test_reverse_radix_permutation(self):
        np.testing.assert_array_equal(reverse_radix_permutation(2), [0, 1])
        np.testing.assert_array_equal(reverse_radix_permutation(3), [0, 2, 1])
        np.testing.assert_array_equal(reverse_radix_permutation(5), [0, 4, 2, 1, 3])

    def test_scrambled_matches_digit_loop(self):
        permutations = {2: [0, 1], 3: [0, 2, 1]}

        def reference(index, base):
            value, factor = 0.0, 1.0 / base
            while index > 0:
                index, digit = divmod(index, base)
                value += permutations[base][digit] * factor
                factor /= base
            return value

        draws = halton_draws(2, 250, 1000, scramble=True)
        expected = np.array([[reference(i, 2), reference(i, 3)] for i in range(1001, 1251)])
        np.testing.assert_allclose(draws, expected, rtol=0, atol=1e-12)

    def test_entries_strictly_inside_unit_interval(self):
        draws = halton_draws(16, 500, 0, scramble=True)
        self.assertTrue(np.all(draws > 0))
        self.assertTrue(np.all(draws < 1))

    def test_deterministic(self):
        np.testing.assert_array_equal(halton_draws(3, 100, 5, True, 1), halton_draws(3, 100, 5, True, 1))

    def test_seed_picks_the_digit_permutation(self):
        np.testing.assert_array_equal(digit_permutation(5, 0), reverse_radix_permutation(5))
        shuffled = digit_permutation(7, 3)
        self.assertEqual(shuffled[0], 0)
        self.assertEqual(sorted(shuffled.tolist()), list(range(7)))
        first, second = halton_draws(4, 200, 10, seed=3), halton_draws(4, 200, 10, seed=4)
        np.testing.assert_array_equal(first[:, 0], second[:, 0])
        self.assertFalse(np.array_equal(first, second))
        self.assertTrue(np.all((first > 0) & (first < 1)))
        unscrambled = halton_draws(2, 5, 0, scramble=False)
        np.testing.assert_array_equal(halton_draws(2, 5, 0, scramble=False, seed=3), unscrambled)

    def test_too_many_dimensions(self):
        with self.assertRaises(UnsupportedDimensionError):
            halton_draws(17, 10)


class NormalInverseCdfTest(SimpleTestCase):
    def test_median(self):
        self.assertEqual(normal_inverse_cdf(0.5), 0.0)

    def test_known_quantile(self):
        self.assertAlmostEqual(normal_inverse_cdf(0.975), 1.959964, places=6)

    def test_roundtrip_and_symmetry(self):
        u = np.linspace(0.001, 0.999, 101)
        z = normal_inverse_cdf(u)
        self.assertTrue(np.all(np.diff(z) > 0))
        np.testing.assert_allclose(special.ndtr(z), u, rtol=0, atol=1e-12)
        np.testing.assert_allclose(normal_inverse_cdf(1 - u), -z, atol=1e-9)

    def test_domain(self):
        for bad in (0.0, 1.0, -0.2, float("nan")):
            with self.assertRaises(DomainError):
                normal_inverse_cdf(bad)


class RdGridTest(SimpleTestCase):
    def test_single_point_inside(self):
        point = rd_grid(1, 2, [0, 0], [10, 10])[0]
        self.assertTrue(np.all(point > 0) and np.all(point < 10))

    def test_containment_and_determinism(self):
        grid = rd_grid(200, 2, [-1, 2], [3, 5])
        self.assertTrue(np.all(grid >= [-1, 2]) and np.all(grid <= [3, 5]))
        np.testing.assert_array_equal(grid, rd_grid(200, 2, [-1, 2], [3, 5]))

    def test_degenerate_box(self):
        with self.assertRaises(DomainError):
            rd_grid(5, 2, [0, 0], [1, 0])

    def test_lower_discrepancy_than_pseudo_random(self):
        def star_discrepancy(points):
            corners = np.linspace(0.02, 1.0, 50)
            worst = 0.0
            for a in corners:
                for b in corners:
                    inside = np.mean((points[:, 0] < a) & (points[:, 1] < b))
                    worst = max(worst, abs(inside - a * b))
            return worst

        grid = rd_grid(50, 2, [0, 0], [10, 10]) / 10
        random_points = np.random.default_rng(0).uniform(size=(50, 2))
        self.assertLess(star_discrepancy(grid), star_discrepancy(random_points))


class FixedPointTest(SimpleTestCase):
    def test_identity_map(self):
        start = np.array([1.0, -2.0])
        x, report = accelerated_fixed_point(lambda v: v, start)
        np.testing.assert_array_equal(x, start)
        self.assertTrue(report.converged)
        self.assertLessEqual(report.iterations, 1)
        self.assertEqual(report.method_used, OptimizerMethod.FIXED_POINT)

    def test_linear_contraction(self):
        for acceleration in Acceleration:
            config = FixedPointConfig(tolerance=1e-12, acceleration=acceleration)
            x, report = accelerated_fixed_point(lambda v: 0.5 * v + 1.0, np.zeros(1), config)
            self.assertTrue(report.converged)
            self.assertAlmostEqual(x[0], 2.0, places=10)

    def test_squarem_agrees_with_plain_iteration(self):
        A = np.array([[0.6, 0.2], [0.1, 0.7]])
        b = np.array([1.0, -1.0])
        plain_config = FixedPointConfig(tolerance=1e-12, acceleration=Acceleration.PLAIN)
        squarem_config = FixedPointConfig(tolerance=1e-12, acceleration=Acceleration.SQUAREM)
        plain, plain_report = accelerated_fixed_point(lambda v: A @ v + b, np.zeros(2), plain_config)
        fast, fast_report = accelerated_fixed_point(lambda v: A @ v + b, np.zeros(2), squarem_config)
        np.testing.assert_allclose(plain, fast, atol=1e-11)
        self.assertLess(fast_report.iterations, plain_report.iterations)

    def test_share_inversion_map_is_faster_with_squarem(self):
        rng = np.random.default_rng(3)
        delta, x1 = random_market_inputs(rng, 8)
        draws = ConsumerDraws.halton(100, 2, skip=1000)
        sigma = np.array([2.0, 2.0])
        s = shares(delta, sigma, x1, draws)
        log_s = np.log(s)

        def contraction(d):
            return d + log_s - np.log(shares(d, sigma, x1, draws))

        start = np.log(s / (1 - s.sum()))
        plain, plain_report = accelerated_fixed_point(
            contraction, start, FixedPointConfig(tolerance=1e-12, acceleration=Acceleration.PLAIN)
        )
        fast, fast_report = accelerated_fixed_point(contraction, start, FixedPointConfig(tolerance=1e-12))
        np.testing.assert_allclose(plain, fast, atol=1e-10)
        self.assertLess(fast_report.iterations, plain_report.iterations)

    def test_non_finite_iterate(self):
        with self.assertRaises(DivergenceError) as raised:
            accelerated_fixed_point(lambda v: v * np.inf, np.ones(2))
        np.testing.assert_array_equal(raised.exception.last_iterate, np.ones(2))

    def test_config_validation(self):
        with self.assertRaises(DomainError):
            FixedPointConfig(tolerance=0.0)
        with self.assertRaises(DomainError):
            FixedPointConfig(max_iterations=0)


class GaussNewtonTest(SimpleTestCase):
    def test_scalar_linear_moment(self):
        theta, report = gauss_newton(lambda t: t - 3.0, lambda t: np.eye(1), np.eye(1), np.zeros(1))
        self.assertAlmostEqual(theta[0], 3.0)
        self.assertEqual(report.iterations, 1)
        self.assertTrue(report.converged)

    def test_linear_least_squares(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((6, 3))
        b = rng.standard_normal(6)
        theta, report = gauss_newton(lambda t: A @ t - b, lambda t: A, np.eye(6), np.zeros(3))
        np.testing.assert_allclose(theta, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-10)
        self.assertEqual(report.iterations, 1)

    def test_gradient_norm_is_that_of_half_the_quadratic_form(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((5, 2))
        b = rng.standard_normal(5)
        weight = np.diag([1.0, 2.0, 0.5, 1.0, 3.0])
        theta, report = gauss_newton(lambda t: A @ t - b, lambda t: A, weight, np.zeros(2), max_iter=0)
        self.assertFalse(report.converged)
        np.testing.assert_array_equal(theta, 0.0)
        self.assertAlmostEqual(report.final_gradient_norm, np.linalg.norm(A.T @ weight @ b), places=12)

    def test_rank_deficient(self):
        with self.assertRaises(RankDeficiencyError):
            gauss_newton(lambda t: t, lambda t: np.zeros((2, 2)), np.eye(2), np.ones(2))

    def test_rosenbrock_agrees_with_bfgs(self):
        def residuals(t):
            return np.array([10.0 * (t[1] - t[0] ** 2), 1.0 - t[0]])

        def jacobian(t):
            return np.array([[-20.0 * t[0], 10.0], [-1.0, 0.0]])

        start = np.array([-1.2, 1.0])
        gn, gn_report = gauss_newton(residuals, jacobian, np.eye(2), start)
        bfgs, _ = quasi_newton(lambda t: residuals(t) @ residuals(t), start)
        self.assertTrue(gn_report.converged)
        np.testing.assert_allclose(gn, [1.0, 1.0], atol=1e-8)
        np.testing.assert_allclose(bfgs, gn, atol=1e-4)


class QuasiNewtonTest(SimpleTestCase):
    def test_quadratic(self):
        theta, report = quasi_newton(lambda t: (t[0] - 1.0) ** 2, np.zeros(1))
        self.assertAlmostEqual(theta[0], 1.0, places=6)
        self.assertTrue(report.converged)
        self.assertEqual(report.method_used, OptimizerMethod.QUASI_NEWTON_FALLBACK)

    def test_constant_objective(self):
        theta, report = quasi_newton(lambda t: 4.0, np.array([0.3, -0.2]))
        np.testing.assert_array_equal(theta, [0.3, -0.2])
        self.assertTrue(report.converged)

    def test_matches_grid_search(self):
        def objective(t):
            return (t[0] - 0.3) ** 2 + 2.0 * (t[1] + 0.7) ** 2 + 0.5 * t[0] * t[1] + 0.1 * t[0] ** 4

        axis = np.linspace(-2, 2, 401)
        values = np.array([[objective((a, b)) for b in axis] for a in axis])
        i, j = np.unravel_index(values.argmin(), values.shape)
        theta, _ = quasi_newton(objective, np.zeros(2))
        np.testing.assert_allclose(theta, [axis[i], axis[j]], atol=0.011)


class FiniteDifferenceTest(SimpleTestCase):
    def test_identity(self):
        np.testing.assert_array_equal(finite_difference_jacobian(lambda v: v, np.array([0.5, 3.0, -7.0])), np.eye(3))

    def test_square(self):
        self.assertAlmostEqual(finite_difference_jacobian(lambda v: v**2, np.array([3.0]))[0, 0], 6.0, delta=1e-7)

    def test_non_finite_coordinate(self):
        with self.assertRaises(NonFiniteEvaluationError) as raised:
            finite_difference_jacobian(lambda v: np.array([v[0] + np.sqrt(v[1])]), np.array([1.0, 0.0]))
        self.assertEqual(raised.exception.coordinate, 1)

    def test_second_order_accuracy(self):
        exact = math.cos(1.0)
        coarse = abs(finite_difference_jacobian(np.sin, np.array([1.0]), relative_step=1e-2)[0, 0] - exact)
        fine = abs(finite_difference_jacobian(np.sin, np.array([1.0]), relative_step=5e-3)[0, 0] - exact)
        self.assertGreater(coarse / fine, 2.0)
        self.assertLess(coarse / fine, 8.0)


class LinearGmmTest(SimpleTestCase):
    def test_own_regressors_give_ols(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(50), rng.standard_normal((50, 2))])
        y = X @ [1.0, -2.0, 0.5] + rng.standard_normal(50)
        np.testing.assert_allclose(linear_gmm(y, X, X), np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-10)

    def test_exact_recovery(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((40, 2))
        Z = X + 0.3 * rng.standard_normal((40, 2))
        np.testing.assert_allclose(linear_gmm(X @ [0.7, -1.1], X, Z, np.eye(2)), [0.7, -1.1], atol=1e-10)

    def test_singular_system(self):
        X = np.ones((10, 2))
        with self.assertRaises(RankDeficiencyError):
            linear_gmm(np.ones(10), X, X, np.eye(2))


# =================================== MIXED LOGIT ===================================
class SharesTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(250, 2, skip=1000)

    def test_single_product_at_zero(self):
        self.assertAlmostEqual(shares(np.zeros(1), np.zeros(2), np.ones((1, 2)), self.draws)[0], 0.5)

    def test_zero_sigma_is_plain_logit(self):
        delta = np.array([0.3, -1.0, 2.0])
        x1 = np.arange(6.0).reshape(3, 2)
        expected = np.exp(delta) / (1 + np.exp(delta).sum())
        np.testing.assert_allclose(shares(delta, np.zeros(2), x1, self.draws), expected, rtol=1e-14)

    def test_simplex_and_large_utilities(self):
        rng = np.random.default_rng(0)
        delta, x1 = random_market_inputs(rng, 15)
        delta = delta + 35.0
        s = shares(delta, np.array([4.0, 4.0]), x1, self.draws)
        s0 = outside_share(delta, np.array([4.0, 4.0]), x1, self.draws)
        self.assertTrue(np.all(np.isfinite(s)))
        self.assertAlmostEqual(s.sum() + s0, 1.0, places=12)

    def test_halton_integral_close_to_large_monte_carlo(self):
        delta = np.array([0.5, -0.2, 1.0])
        x1 = np.array([[0.3, -0.5], [-0.8, 0.2], [0.1, 0.6]])
        sigma = np.array([4.0, 4.0])
        rng = np.random.default_rng(11)
        chunks = [
            shares(delta, sigma, x1, ConsumerDraws.pseudo_random(100_000, 2, rng=rng)) for _ in range(10)
        ]
        np.testing.assert_allclose(shares(delta, sigma, x1, self.draws), np.mean(chunks, axis=0), atol=5e-3)

    def test_monotone_in_own_utility(self):
        rng = np.random.default_rng(4)
        delta, x1 = random_market_inputs(rng, 5)
        sigma = np.array([1.0, 2.0])
        base = shares(delta, sigma, x1, self.draws)
        bumped = shares(delta + np.eye(5)[2] * 0.1, sigma, x1, self.draws)
        self.assertGreater(bumped[2], base[2])
        self.assertTrue(np.all(np.delete(bumped - base, 2) < 0))


class InversionTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(250, 2, skip=1000)

    def test_zero_sigma_closed_form(self):
        s = np.array([0.2, 0.1, 0.3])
        delta = invert_shares(s, 0.4, np.zeros(2), np.ones((3, 2)), self.draws)
        np.testing.assert_allclose(delta, np.log(s / 0.4), rtol=0, atol=1e-12)

    def test_uniform_shares(self):
        s = np.full(4, 0.2)
        np.testing.assert_allclose(invert_shares(s, 0.2, np.zeros(2), np.ones((4, 2)), self.draws), 0.0, atol=1e-15)

    def test_roundtrip(self):
        rng = np.random.default_rng(5)
        delta, x1 = random_market_inputs(rng, 5)
        sigma = np.array([2.0, 2.0])
        s = shares(delta, sigma, x1, self.draws)
        recovered = invert_shares(s, 1 - s.sum(), sigma, x1, self.draws)
        np.testing.assert_allclose(recovered, delta, rtol=0, atol=1e-8)

    def test_random_markets_roundtrip(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            J = int(rng.integers(1, 16))
            delta, x1 = random_market_inputs(rng, J)
            sigma = rng.uniform(0, 4, size=2)
            s = shares(delta, sigma, x1, self.draws)
            recovered = invert_shares(s, 1 - s.sum(), sigma, x1, self.draws)
            self.assertLessEqual(np.max(np.abs(recovered - delta)), 1e-8)

    def test_stacked_markets_match_single_inversions(self):
        rng = np.random.default_rng(7)
        sigma = np.array([1.0, 3.0])
        markets = []
        for r, J in enumerate([3, 5, 3, 5, 4]):
            delta, x1 = random_market_inputs(rng, J)
            markets.append(make_market(delta, sigma, x1, self.draws, market_id=(r, 1)))
        stacked = invert_markets(markets, sigma, self.draws)
        for market, delta in zip(markets, stacked):
            single = invert_shares(market.s, market.s0, sigma, market.x1, self.draws)
            np.testing.assert_allclose(delta, single, atol=1e-10)

    def test_rejects_zero_share(self):
        with self.assertRaises(DomainError):
            invert_shares(np.array([0.0, 0.5]), 0.5, np.ones(2), np.ones((2, 2)), self.draws)


class ShareDerivativesTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(250, 2, skip=1000)
        rng = np.random.default_rng(8)
        self.delta, self.x1 = random_market_inputs(rng, 4)
        self.sigma = np.array([1.5, 0.8])

    def test_logit_jacobian(self):
        s = shares(self.delta, np.zeros(2), self.x1, self.draws)
        np.testing.assert_allclose(
            share_jacobian_delta(self.delta, np.zeros(2), self.x1, self.draws), np.diag(s) - np.outer(s, s), atol=1e-15
        )
        self.assertAlmostEqual(share_jacobian_delta(np.zeros(1), np.zeros(2), np.ones((1, 2)), self.draws)[0, 0], 0.25)

    def test_jacobian_signs_and_row_sums(self):
        jacobian = share_jacobian_delta(self.delta, self.sigma, self.x1, self.draws)
        self.assertTrue(np.all(np.diag(jacobian) > 0))
        self.assertTrue(np.all(jacobian[~np.eye(4, dtype=bool)] < 0))
        self.assertTrue(np.all(jacobian.sum(axis=1) > 0))

    def test_jacobian_matches_finite_differences(self):
        numeric = finite_difference_jacobian(lambda d: shares(d, self.sigma, self.x1, self.draws), self.delta)
        analytic = share_jacobian_delta(self.delta, self.sigma, self.x1, self.draws)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-10)

    def test_dsigma_matches_finite_differences(self):
        numeric = finite_difference_jacobian(lambda sg: shares(self.delta, sg, self.x1, self.draws), self.sigma)
        analytic = share_dsigma(self.delta, self.sigma, self.x1, self.draws)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-10)

    def test_dsigma_vanishes_at_zero_with_antithetic_draws(self):
        antithetic = self.draws.symmetrized()
        np.testing.assert_allclose(share_dsigma(self.delta, np.zeros(2), self.x1, antithetic), 0.0, atol=1e-12)
        np.testing.assert_allclose(
            share_cross_sigma_delta(self.delta, np.zeros(2), self.x1, antithetic), 0.0, atol=1e-12
        )

    def test_single_product_constant_characteristic(self):
        antithetic = self.draws.symmetrized()
        x1 = np.ones((1, 2))
        np.testing.assert_allclose(share_dsigma(np.zeros(1), np.zeros(2), x1, antithetic), 0.0, atol=1e-12)
        np.testing.assert_allclose(share_cross_sigma_delta(np.zeros(1), np.zeros(2), x1, antithetic), 0.0, atol=1e-12)

    def test_hessian_symmetry_and_finite_differences(self):
        hessian = share_hessian_delta(self.delta, self.sigma, self.x1, self.draws)
        np.testing.assert_allclose(hessian, hessian.transpose(0, 2, 1), atol=1e-12)
        numeric = finite_difference_jacobian(
            lambda d: share_jacobian_delta(d, self.sigma, self.x1, self.draws).ravel(), self.delta
        ).reshape(4, 4, 4)
        np.testing.assert_allclose(hessian, numeric, rtol=1e-4, atol=1e-9)

    def test_single_product_hessian_at_half(self):
        value = share_hessian_delta(np.zeros(1), np.zeros(2), np.ones((1, 2)), self.draws)[0, 0, 0]
        self.assertAlmostEqual(value, 0.0, places=15)

    def test_cross_derivative_matches_finite_differences(self):
        cross = share_cross_sigma_delta(self.delta, self.sigma, self.x1, self.draws)
        numeric = finite_difference_jacobian(
            lambda sg: share_jacobian_delta(self.delta, sg, self.x1, self.draws).ravel(), self.sigma
        )
        np.testing.assert_allclose(cross, numeric.T.reshape(2, 4, 4), rtol=1e-4, atol=1e-9)


class InversionDerivativesTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(250, 2, skip=1000)
        rng = np.random.default_rng(9)
        delta, x1 = random_market_inputs(rng, 4)
        self.theta = Theta(alpha=-2.0, sigma=[1.2, 0.7])
        self.market = make_market(delta, self.theta.sigma, x1, self.draws)

    def test_logit_closed_form(self):
        derivatives = inversion_derivatives(self.market, Theta(-1.0, [0.0, 0.0]), self.draws)
        s, s0 = self.market.s, self.market.s0
        np.testing.assert_allclose(derivatives.ds, np.diag(1 / s) + 1 / s0, rtol=1e-10)

    def test_inverse_of_share_jacobian(self):
        derivatives = inversion_derivatives(self.market, self.theta, self.draws)
        np.testing.assert_allclose(derivatives.ds @ derivatives.jacobian, np.eye(4), atol=1e-10)

    def test_dsigma_matches_finite_differences(self):
        derivatives = inversion_derivatives(self.market, self.theta, self.draws)
        numeric = finite_difference_jacobian(
            lambda sg: invert_shares(self.market.s, self.market.s0, sg, self.market.x1, self.draws), self.theta.sigma
        )
        np.testing.assert_allclose(derivatives.dsigma, numeric, rtol=1e-4, atol=1e-8)

    def test_dcross_matches_finite_differences(self):
        derivatives = inversion_derivatives(self.market, self.theta, self.draws)

        def inverse_jacobian(sigma):
            return inversion_derivatives(self.market, Theta(-2.0, sigma), self.draws).ds.ravel()

        numeric = finite_difference_jacobian(inverse_jacobian, self.theta.sigma).T.reshape(2, 4, 4)
        np.testing.assert_allclose(derivatives.dcross, numeric, rtol=1e-4, atol=1e-7)

    def test_near_singular_jacobian(self):
        market = Market(
            market_id=(0, 1),
            x=np.ones((2, 1)),
            x1=np.ones((2, 1)),
            p=np.ones(2),
            s=np.array([1e-20, 0.5]),
            s0=0.5,
            g=np.zeros(2),
        )
        with self.assertRaises(ConditioningError) as raised:
            inversion_derivatives(market, Theta(-1.0, [0.0]), ConsumerDraws.halton(10, 1))
        self.assertGreater(raised.exception.condition_number, 1e12)


class LocalToLogitTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(10)
        skewed = rng.exponential(size=(4000, 2))
        self.draws = ConsumerDraws(nu=skewed, source=DrawSource.PSEUDO_RANDOM, seed=10).whitened()
        self.delta = np.array([0.4, -0.3, 0.9, -1.2])
        self.x1 = np.array([[1.0, -0.5], [-0.7, 1.3], [0.2, 0.4], [1.5, -1.0]])

    def test_whitened_draw_moments(self):
        np.testing.assert_allclose(self.draws.nu.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(self.draws.nu.T @ self.draws.nu / self.draws.count, np.eye(2), atol=1e-12)

    def test_zero_sigma_and_zero_characteristics(self):
        s = np.array([0.1, 0.2, 0.3])
        np.testing.assert_allclose(local_to_logit_inversion(s, 0.4, np.ones((3, 2)), [0, 0]), np.log(s / 0.4))
        np.testing.assert_allclose(local_to_logit_inversion(s, 0.4, np.zeros((3, 2)), [3, 1]), np.log(s / 0.4))

    def _inversion_error(self, scale):
        sigma = np.array([scale, scale])
        s = shares(self.delta, sigma, self.x1, self.draws)
        approximation = local_to_logit_inversion(s, 1 - s.sum(), self.x1, sigma)
        return np.max(np.abs(approximation - self.delta))

    def _share_error(self, scale):
        sigma = np.array([scale, scale])
        exact = shares(self.delta, sigma, self.x1, self.draws)
        return np.max(np.abs(local_to_logit_shares(self.delta, self.x1, sigma) - exact))

    def test_inversion_error_is_third_order(self):
        ratio = self._inversion_error(0.06) / self._inversion_error(0.02)
        self.assertGreater(ratio, 9.0)
        self.assertLess(ratio, 81.0)

    def test_share_error_is_third_order(self):
        ratio = self._share_error(0.06) / self._share_error(0.02)
        self.assertGreater(ratio, 9.0)
        self.assertLess(ratio, 81.0)


# =================================== NESTED LOGIT ===================================
def nested_market(s, nest, g, lagged_s=None, market_id=(0, 2)):
    s = np.asarray(s, dtype=float)
    J = s.size
    lagged = None
    if lagged_s is not None:
        lagged_s = np.asarray(lagged_s, dtype=float)
        lagged = NestedMarket(
            market_id=(market_id[0], 1), x=np.ones((J, 1)), x1=np.zeros((J, 0)), p=np.ones(J),
            s=lagged_s, s0=1 - lagged_s.sum(), g=np.zeros(J), nest=nest,
        )
    return NestedMarket(
        market_id=market_id, x=np.ones((J, 1)), x1=np.zeros((J, 0)), p=np.ones(J),
        s=s, s0=1 - s.sum(), g=np.asarray(g, dtype=float), nest=nest, lagged=lagged,
    )


class NestedSharesTest(SimpleTestCase):
    def test_zero_nesting_is_logit(self):
        delta = np.array([0.2, -0.4, 1.1])
        s, s0 = nested_shares(delta, 0.0, [0, 0, 1])
        denominator = 1 + np.exp(delta).sum()
        np.testing.assert_allclose(s, np.exp(delta) / denominator, rtol=1e-13)
        self.assertAlmostEqual(s0, 1 / denominator, places=14)

    def test_identical_products_share_equally(self):
        s, _ = nested_shares(np.array([0.5, 0.5, -1.0]), 0.6, [1, 1, 2])
        self.assertAlmostEqual(s[0], s[1], places=15)

    def test_hand_computed_market(self):
        e = math.exp
        inclusive_a = e(2.0) + e(0.0)
        inclusive_b = e(-2.0)
        denominator = 1 + math.sqrt(inclusive_a) + math.sqrt(inclusive_b)
        nest_a, nest_b = math.sqrt(inclusive_a) / denominator, math.sqrt(inclusive_b) / denominator
        expected = [nest_a * e(2.0) / inclusive_a, nest_a / inclusive_a, nest_b]
        s, s0 = nested_shares(np.array([1.0, 0.0, -1.0]), 0.5, [1, 1, 2])
        np.testing.assert_allclose(s, expected, rtol=1e-13)
        self.assertAlmostEqual(s0, 1 / denominator, places=14)

    def test_nesting_parameter_domain(self):
        for sigma in (-0.1, 1.0, 1.5):
            with self.assertRaises(DomainError):
                nested_shares(np.zeros(2), sigma, [0, 1])


class NestedInversionTest(SimpleTestCase):
    def test_zero_nesting(self):
        s = np.array([0.2, 0.3, 0.1])
        np.testing.assert_allclose(nested_inversion(s, 0.4, [0, 0, 1], 0.0), np.log(s / 0.4))

    def test_roundtrip(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            nest = rng.integers(0, 3, size=7)
            sigma = rng.uniform(0, 0.95)
            delta = rng.standard_normal(7)
            s, s0 = nested_shares(delta, sigma, nest)
            np.testing.assert_allclose(nested_inversion(s, s0, nest, sigma), delta, atol=1e-12)

    def test_single_nest_uniform_shares(self):
        s = np.full(4, 0.15)
        np.testing.assert_allclose(within_nest_log_shares(s, np.zeros(4)), np.log(1 / 4))


class NestedInstrumentsTest(SimpleTestCase):
    def test_relative_shock(self):
        market = nested_market([0.1, 0.2, 0.3], [0, 0, 1], [1.0, 0.0, 5.0])
        np.testing.assert_allclose(iv_relative_shock(market), [0.5, -0.5, 0.0])
        flat = nested_market([0.1, 0.2, 0.3], [0, 0, 0], [2.0, 2.0, 2.0])
        np.testing.assert_allclose(iv_relative_shock(flat), 0.0)

    def test_weighted_shock(self):
        market = nested_market([0.1, 0.2], [0, 0], [1.0, 0.0], lagged_s=[0.3, 0.1])
        self.assertAlmostEqual(iv_weighted_shock(market)[0], 0.25)
        weighted = iv_weighted_shock(market)
        self.assertAlmostEqual(0.3 * weighted[0] + 0.1 * weighted[1], 0.0)

    def test_weighted_reduces_to_relative_with_equal_lagged_shares(self):
        market = nested_market([0.1, 0.2, 0.1, 0.2], [0, 0, 1, 1], [0.3, -0.1, 0.7, 0.2], lagged_s=[0.2] * 4)
        np.testing.assert_allclose(iv_weighted_shock(market), iv_relative_shock(market))

    def test_missing_lagged_data(self):
        market = nested_market([0.1, 0.2], [0, 0], [1.0, 0.0])
        with self.assertRaises(MissingLaggedDataError):
            iv_weighted_shock(market)
        with self.assertRaises(MissingLaggedDataError):
            iv_exact_prediction(market, -1.0, 0.5, 0.8, use_lagged=True)

    def test_exact_prediction_without_shocks(self):
        market = nested_market([0.1, 0.2, 0.1, 0.2, 0.1], [0, 0, 0, 1, 1], np.zeros(5))
        prediction = iv_exact_prediction(market, -2.0, 0.4, 0.7)
        np.testing.assert_allclose(prediction, -np.log([3, 3, 3, 2, 2]))

    def test_exact_prediction_with_lagged_shares(self):
        lagged_s = np.array([0.1, 0.3, 0.2, 0.15])
        nest = np.array([0, 0, 1, 1])
        market = nested_market([0.2, 0.2, 0.2, 0.2], nest, np.zeros(4), lagged_s=lagged_s)
        prediction = iv_exact_prediction(market, -2.0, 0.4, 0.7, use_lagged=True)
        np.testing.assert_allclose(prediction, np.log(lagged_s / [0.4, 0.4, 0.35, 0.35]), atol=1e-12)

    def test_first_order_matches_relative_shock(self):
        g = np.array([0.4, -0.3, 0.8, 0.1, -0.5])
        nest = [0, 0, 0, 1, 1]
        alpha, sigma, pi = -2.0, 0.4, 0.7
        kappa = alpha * pi / (1 - sigma)

        def gap(scale):
            market = nested_market([0.1] * 5, nest, scale * g)
            zero = nested_market([0.1] * 5, nest, np.zeros(5))
            change = iv_exact_prediction(market, alpha, sigma, pi) - iv_exact_prediction(zero, alpha, sigma, pi)
            return np.max(np.abs(change - scale * kappa * iv_relative_shock(market, shocks=g)))

        ratio = gap(1e-2) / gap(5e-3)
        self.assertGreater(ratio, 3.0)
        self.assertLess(ratio, 5.0)

    def test_invalid_checks(self):
        market = nested_market([0.1, 0.2], [0, 0], [1.0, 0.0])
        with self.assertRaises(DomainError):
            iv_exact_prediction(market, -1.0, 1.0, 0.5)
        with self.assertRaises(DomainError):
            iv_exact_prediction(market, -1.0, 0.5, 0.0)

    def test_randomized_shocks_are_uncorrelated_with_allocation(self):
        rng = np.random.default_rng(13)
        nest = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
        position = np.arange(nest.size, dtype=float)
        statistics = []
        for _ in range(1000):
            market = nested_market([0.05] * 9, nest, rng.standard_normal(9), lagged_s=np.linspace(0.02, 0.1, 9))
            statistics.append([position @ iv_relative_shock(market), position @ iv_weighted_shock(market)])
        statistics = np.array(statistics)
        standard_errors = statistics.std(axis=0, ddof=1) / np.sqrt(len(statistics))
        self.assertTrue(np.all(np.abs(statistics.mean(axis=0)) <= 3 * standard_errors))


class RecenterExactTest(SimpleTestCase):
    def setUp(self):
        self.market = nested_market([0.1, 0.2, 0.1, 0.2], [0, 0, 1, 1], [0.5, -0.2, 0.9, 0.0])

    def test_counterfactuals_equal_to_actual(self):
        def prediction(market, shocks):
            return iv_exact_prediction(market, -2.0, 0.3, 0.8, shocks=shocks)

        np.testing.assert_allclose(recenter_exact(prediction, self.market, [self.market.g] * 3), 0.0)

    def test_linear_prediction(self):
        weights = np.array([[1.0, 2.0, 0.0, -1.0], [0.5, 0.0, 1.0, 1.0], [0.0, 0.0, 3.0, 0.2], [1.0, 1.0, 1.0, 1.0]])
        counterfactuals = [np.array([0.1, 0.2, 0.3, 0.4]), np.array([-0.3, 0.0, 0.5, 0.1])]
        recentered = recenter_exact(lambda market, shocks: weights @ shocks, self.market, counterfactuals)
        expected = weights @ (self.market.g - np.mean(counterfactuals, axis=0))
        np.testing.assert_allclose(recentered, expected, atol=1e-14)

    def test_recentering_over_own_permutations_averages_to_zero(self):
        rng = np.random.default_rng(14)
        counterfactuals = within_market_permutations(self.market, 7, rng) + [self.market.g]

        def prediction(market, shocks):
            return iv_exact_prediction(market, -2.0, 0.3, 0.8, shocks=shocks)

        values = [
            recenter_exact(prediction, nested_market(self.market.s, self.market.nest, shocks), counterfactuals)
            for shocks in counterfactuals
        ]
        np.testing.assert_allclose(np.mean(values, axis=0), 0.0, atol=1e-12)

    def test_expected_prediction_differs_from_no_shock_value(self):
        def prediction(market, shocks):
            return iv_exact_prediction(market, -4.0, 0.3, 1.0, shocks=shocks)

        rng = np.random.default_rng(15)
        counterfactuals = within_market_permutations(self.market, 50, rng)
        expected = np.mean([prediction(self.market, shocks) for shocks in counterfactuals], axis=0)
        no_shock = prediction(self.market, np.zeros(4))
        self.assertGreater(np.max(np.abs(expected - no_shock)), 1e-3)

    def test_validation(self):
        with self.assertRaises(DomainError):
            recenter_exact(lambda market, shocks: shocks, self.market, [])
        with self.assertRaises(ShapeMismatchError):
            recenter_exact(lambda market, shocks: shocks, self.market, [np.zeros(3)])


class NestedSimulationTest(SimpleTestCase):
    def test_panel_structure(self):
        panel = simulate_nested_panel(NestedDgpConfig(n_markets=5, seed=1))
        self.assertEqual(len(panel.markets), 5)
        for market in panel.markets:
            self.assertIsNotNone(market.lagged)
            np.testing.assert_array_equal(market.lagged.g, 0.0)
            self.assertAlmostEqual(market.s.sum() + market.s0, 1.0, places=12)

    def test_deterministic(self):
        first = simulate_nested_panel(NestedDgpConfig(n_markets=3, seed=2))
        second = simulate_nested_panel(NestedDgpConfig(n_markets=3, seed=2))
        for a, b in zip(first.markets, second.markets):
            np.testing.assert_array_equal(a.s, b.s)

    @tag("slow")
    def test_two_stage_least_squares_recovers_parameters(self):
        estimates = np.array([
            [estimate.alpha, estimate.sigma]
            for estimate in (
                estimate_nested_2sls(simulate_nested_panel(NestedDgpConfig(seed=seed)).markets)
                for seed in range(200)
            )
        ])
        bias = estimates.mean(axis=0) - [-1.0, 0.5]
        standard_errors = estimates.std(axis=0, ddof=1) / np.sqrt(len(estimates))
        self.assertTrue(np.all(np.abs(bias) < 3 * standard_errors), msg=f"bias {bias}, se {standard_errors}")
