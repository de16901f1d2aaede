from types import SimpleNamespace

import numpy as np
from django.test import SimpleTestCase

from apps.demand.exceptions import DegenerateRegressorError, DomainError, MissingLaggedDataError, ShapeMismatchError
from apps.demand.mixedlogit import ConsumerDraws, DrawSource, Market, Theta, invert_shares, inversion_derivatives, shares
from apps.demand.solvers import substream
from apps.simulation.dgp import DgpConfig, Scenario, apply_bliss_point, draw_characteristics, simulate_panel

from .characteristics import GhVariant, blp_sum_iv, gh_differentiation_iv, pooled_characteristic_sd
from .recentered import (
    PermutationScope,
    build_ssiv,
    estimate_pass_through,
    fiv_prediction,
    local_to_logit_price_ssiv,
    local_to_logit_ssiv,
    recenter_by_permutation,
    shock_permutations,
    ssiv_weights,
)
from .sets import InstrumentKind, InstrumentSet, RecenteredInstruments, build_instrument_set


def characteristics_market(x1):
    return SimpleNamespace(x1=np.asarray(x1, dtype=float))


def paired_market(rng, draws, J=4, sigma=(0.8, 0.5), region=1, g=None, price_change=None):
    """Period-2 market with its period-1 market attached as ``lagged``."""
    x1 = rng.standard_normal((J, 2))
    x = np.column_stack([np.ones(J), x1])
    lagged_s = shares(rng.standard_normal(J) - 1.0, sigma, x1, draws)
    lagged_p = 5.0 + rng.uniform(size=J)
    g = rng.normal(scale=0.2, size=J) if g is None else np.asarray(g, dtype=float)
    price_change = 0.8 * g if price_change is None else price_change
    current_s = shares(rng.standard_normal(J) - 1.0, sigma, x1, draws)
    lagged = Market(
        market_id=(region, 1), x=x, x1=x1, p=lagged_p, s=lagged_s, s0=1 - lagged_s.sum(), g=np.zeros(J)
    )
    return Market(
        market_id=(region, 2),
        x=x,
        x1=x1,
        p=lagged_p + price_change,
        s=current_s,
        s0=1 - current_s.sum(),
        g=g,
        lagged=lagged,
    )


# =================================== Characteristic IVs ===================================
class BlpSumTest(SimpleTestCase):
    def test_two_products(self):
        z = blp_sum_iv(characteristics_market([[1.0, 2.0], [3.0, -1.0]]))
        np.testing.assert_array_equal(z, [[3.0, -1.0], [1.0, 2.0]])

    def test_identical_products(self):
        z = blp_sum_iv(characteristics_market(np.tile([0.5, -2.0], (6, 1))))
        np.testing.assert_allclose(z, np.tile([2.5, -10.0], (6, 1)))

    def test_single_product(self):
        np.testing.assert_array_equal(blp_sum_iv(characteristics_market([[4.0, 1.0]])), [[0.0, 0.0]])

    def test_matches_loop(self):
        x1 = np.random.default_rng(0).standard_normal((7, 2))
        expected = np.array([[sum(x1[k, ell] for k in range(7) if k != j) for ell in range(2)] for j in range(7)])
        np.testing.assert_allclose(blp_sum_iv(characteristics_market(x1)), expected, rtol=1e-12, atol=1e-12)


class GhDifferentiationTest(SimpleTestCase):
    def test_identical_products(self):
        market = characteristics_market(np.ones((5, 2)))
        np.testing.assert_array_equal(gh_differentiation_iv(market, GhVariant.QUADRATIC), np.zeros((5, 2)))
        np.testing.assert_array_equal(gh_differentiation_iv(market, "local", kappa=[0.1, 0.1]), np.full((5, 2), 4.0))

    def test_local_boundary_is_strict(self):
        market = characteristics_market([[0.0, 0.0], [0.5, 0.25]])
        z = gh_differentiation_iv(market, GhVariant.LOCAL, kappa=[0.5, 0.5])
        np.testing.assert_array_equal(z[:, 0], [0.0, 0.0])
        np.testing.assert_array_equal(z[:, 1], [1.0, 1.0])

    def test_matches_pairwise_loops(self):
        x1 = np.random.default_rng(1).standard_normal((9, 2))
        kappa = np.array([0.6, 0.9])
        quadratic = np.zeros((9, 2))
        local = np.zeros((9, 2))
        for j in range(9):
            for k in range(9):
                if k == j:
                    continue
                for ell in range(2):
                    quadratic[j, ell] += (x1[j, ell] - x1[k, ell]) ** 2
                    local[j, ell] += abs(x1[j, ell] - x1[k, ell]) < kappa[ell]
        market = characteristics_market(x1)
        np.testing.assert_allclose(gh_differentiation_iv(market, "quadratic"), quadratic, rtol=1e-12)
        np.testing.assert_array_equal(gh_differentiation_iv(market, "local", kappa), local)
        self.assertTrue(np.all((local >= 0) & (local <= 8)))

    def test_threshold_validation(self):
        market = characteristics_market(np.zeros((3, 2)))
        with self.assertRaises(DomainError):
            gh_differentiation_iv(market, GhVariant.LOCAL)
        with self.assertRaises(DomainError):
            gh_differentiation_iv(market, GhVariant.LOCAL, kappa=[0.0, 1.0])
        with self.assertRaises(ShapeMismatchError):
            gh_differentiation_iv(market, GhVariant.LOCAL, kappa=[1.0])

    def test_pooled_sd(self):
        rng = np.random.default_rng(2)
        markets = [characteristics_market(rng.standard_normal((J, 2))) for J in (3, 5, 4)]
        expected = np.vstack([market.x1 for market in markets]).std(axis=0, ddof=1)
        np.testing.assert_allclose(pooled_characteristic_sd(markets), expected)

    def test_bliss_point_makes_local_iv_endogenous(self):
        config = DgpConfig(n_regions=700, scenario=Scenario.BLISS_POINT, seed=3)
        raw = draw_characteristics(config)
        bliss = substream(config.seed, "bliss").standard_normal(config.n_regions)
        penalties, counts, markets = [], [], []
        for r in range(config.n_regions):
            x1, penalized = apply_bliss_point(config, bliss[r], raw[r], np.zeros((1, config.n_products)))
            markets.append(characteristics_market(x1))
            penalties.append(-penalized[0])
        kappa = pooled_characteristic_sd(markets)
        for market in markets:
            counts.append(gh_differentiation_iv(market, GhVariant.LOCAL, kappa)[:, 0])
        correlation = np.corrcoef(np.concatenate(penalties), np.concatenate(counts))[0, 1]
        self.assertLess(correlation * np.sqrt(700 * 15), -3.0)


# =================================== Pass-through ===================================
class PassThroughTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(100, 2)

    def test_exact_slope(self):
        rng = np.random.default_rng(4)
        markets = []
        for region in range(3):
            g = rng.normal(scale=0.3, size=4)
            markets.append(paired_market(rng, self.draws, region=region, g=g, price_change=0.7 * g))
        pass_through = estimate_pass_through(markets)
        self.assertAlmostEqual(pass_through.pi_check, 0.7, places=10)
        self.assertAlmostEqual(pass_through.intercept, 0.0, places=10)

    def test_constant_shocks(self):
        rng = np.random.default_rng(5)
        markets = [paired_market(rng, self.draws, g=np.zeros(4), price_change=rng.standard_normal(4))]
        with self.assertRaises(DegenerateRegressorError):
            estimate_pass_through(markets)

    def test_needs_lagged_markets(self):
        market = paired_market(np.random.default_rng(6), self.draws)
        with self.assertRaises(MissingLaggedDataError):
            estimate_pass_through([market.lagged])

    def test_simulated_panel(self):
        panel = simulate_panel(DgpConfig(n_regions=20, dgp_draws=200, seed=7))
        first = estimate_pass_through(panel)
        again = estimate_pass_through(simulate_panel(DgpConfig(n_regions=20, dgp_draws=200, seed=7)))
        self.assertGreater(first.pi_check, 0.0)
        self.assertLess(first.pi_check, 1.5)
        self.assertEqual(first.pi_check, again.pi_check)


# =================================== Shift-share IV ===================================
class ShiftShareTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(250, 2, skip=1000)
        self.rng = np.random.default_rng(12)
        self.market = paired_market(self.rng, self.draws, J=5)
        self.theta = Theta(alpha=-2.0, sigma=[0.9, 0.6])

    def test_weights_ignore_realized_shocks(self):
        weights = ssiv_weights(self.market, self.theta, 0.8, self.draws)
        self.market.g = self.rng.permutation(self.market.g)
        np.testing.assert_array_equal(ssiv_weights(self.market, self.theta, 0.8, self.draws), weights)

    def test_zero_recentered_shocks(self):
        weights = ssiv_weights(self.market, self.theta, 0.8, self.draws)
        z = build_ssiv(self.market, weights, 0.8, shock_means=self.market.g)
        np.testing.assert_array_equal(z, np.zeros((5, 3)))

    def test_identity_weights(self):
        weights = np.repeat(2.5 * np.eye(5)[:, :, None], 2, axis=2)
        z = build_ssiv(self.market, weights, 0.8)
        np.testing.assert_allclose(z[:, 0], -0.8 * self.market.g)
        np.testing.assert_allclose(z[:, 1:], 2.5 * np.column_stack([self.market.g, self.market.g]))

    def test_matches_dense_contraction(self):
        weights = ssiv_weights(self.market, self.theta, 0.8, self.draws)
        z = build_ssiv(self.market, weights, 0.8)
        g = self.market.g
        expected = np.array([[sum(weights[j, k, ell] * g[k] for k in range(5)) for ell in range(2)] for j in range(5)])
        np.testing.assert_allclose(z[:, 1:], expected, rtol=1e-12, atol=1e-14)

    def test_matches_derivative_composition(self):
        derivatives = inversion_derivatives(self.market.lagged, self.theta, self.draws)
        weights = ssiv_weights(self.market, self.theta, 0.8, self.draws)
        for ell in range(2):
            expected = -2.0 * 0.8 * derivatives.dcross[ell] @ derivatives.jacobian
            np.testing.assert_allclose(weights[:, :, ell], expected, rtol=1e-12, atol=1e-14)

    def test_linear_in_alpha_and_pi(self):
        base = build_ssiv(self.market, ssiv_weights(self.market, self.theta, 0.8, self.draws), 0.8)
        doubled_alpha = Theta(alpha=-4.0, sigma=self.theta.sigma)
        z_alpha = build_ssiv(self.market, ssiv_weights(self.market, doubled_alpha, 0.8, self.draws), 0.8)
        np.testing.assert_allclose(z_alpha[:, 1:], 2.0 * base[:, 1:], rtol=1e-12)
        z_pi = build_ssiv(self.market, ssiv_weights(self.market, self.theta, 8.0, self.draws), 8.0)
        np.testing.assert_allclose(z_pi, 10.0 * base, rtol=1e-12)

    def test_missing_lagged_market(self):
        with self.assertRaises(MissingLaggedDataError):
            ssiv_weights(self.market.lagged, self.theta, 0.8, self.draws)


class LocalToLogitShiftShareTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(13)
        skewed = rng.exponential(size=(4000, 2))
        self.draws = ConsumerDraws(nu=skewed, source=DrawSource.PSEUDO_RANDOM, seed=13).whitened()
        self.market = paired_market(rng, self.draws, J=4, sigma=(0.0, 0.0))

    def _gap(self, scale):
        theta = Theta(alpha=-1.5, sigma=[scale, scale])
        z = build_ssiv(self.market, ssiv_weights(self.market, theta, 0.9, self.draws), 0.9)
        lagged = self.market.lagged
        closed = local_to_logit_ssiv(lagged.s, lagged.x1, -1.5, 0.9, theta.sigma, self.market.g)
        return np.max(np.abs(z[:, 1:] - closed))

    def test_gap_is_second_order(self):
        scales = np.array([0.16, 0.08, 0.04, 0.02])
        gaps = np.array([self._gap(scale) for scale in scales])
        order = np.polyfit(np.log(scales), np.log(gaps), 1)[0]
        self.assertGreater(order, 1.5)
        self.assertLess(order, 3.5)

    def test_intercept_characteristic(self):
        s = np.array([0.2, 0.1, 0.3])
        g = np.array([0.4, -0.2, 0.1])
        s0 = 1 - s.sum()
        z = local_to_logit_ssiv(s, np.ones((3, 1)), -2.0, 0.5, [0.3], g)
        expected = 2.0 * -2.0 * 0.5 * 0.3 * s0 * (1 - s0) * (s @ g) / s.sum()
        np.testing.assert_allclose(z[:, 0], expected, rtol=1e-12)

    def test_price_column(self):
        p = np.array([1.0, 2.0, 1.5])
        s = np.array([0.2, 0.3, 0.1])
        g = np.array([0.1, -0.3, 0.2])
        np.testing.assert_array_equal(local_to_logit_price_ssiv(p, s, np.zeros(3), -2.0, 0.7, 0.4), np.zeros(3))
        np.testing.assert_array_equal(local_to_logit_price_ssiv(p, s, g, -2.0, 0.7, 0.0), np.zeros(3))
        np.testing.assert_allclose(
            local_to_logit_price_ssiv(p, s, g, -2.0, 1.4, 0.4),
            2.0 * local_to_logit_price_ssiv(p, s, g, -2.0, 0.7, 0.4),
            rtol=1e-12,
        )


# =================================== Formula IV ===================================
class FormulaIvTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(250, 2, skip=1000)
        self.market = paired_market(np.random.default_rng(14), self.draws, J=5)
        self.theta = Theta(alpha=-2.0, sigma=[0.9, 0.6])
        lagged = self.market.lagged
        self.lagged_delta = invert_shares(lagged.s, lagged.s0, self.theta.sigma, lagged.x1, self.draws)

    def test_zero_shocks_give_lagged_derivative(self):
        prediction = fiv_prediction(self.market, self.theta, 0.8, self.lagged_delta, np.zeros(5), self.draws)
        derivatives = inversion_derivatives(self.market.lagged, self.theta, self.draws)
        np.testing.assert_allclose(prediction, derivatives.dsigma, rtol=1e-8, atol=1e-10)

    def test_first_order_agrees_with_shift_share(self):
        epsilon = 1e-5
        g = self.market.g

        def predict(shocks):
            return fiv_prediction(self.market, self.theta, 0.8, self.lagged_delta, shocks, self.draws)

        slope = (predict(epsilon * g) - predict(-epsilon * g)) / (2 * epsilon)
        z = build_ssiv(self.market, ssiv_weights(self.market, self.theta, 0.8, self.draws), 0.8)
        np.testing.assert_allclose(slope, z[:, 1:], rtol=1e-5, atol=1e-8)

    def test_equal_shocks_recenter_to_zero(self):
        actual = [np.full(5, 0.3)]

        def values(shocks):
            return [fiv_prediction(self.market, self.theta, 0.8, self.lagged_delta, shocks[0], self.draws)]

        recentered = recenter_by_permutation(values, actual, count=5, seed=1)
        np.testing.assert_allclose(recentered[0], 0.0, atol=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            fiv_prediction(self.market, self.theta, 0.8, self.lagged_delta, np.zeros(4), self.draws)


# =================================== Permutation Recentering ===================================
class PermutationTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(15)
        self.actual = [rng.standard_normal(J) for J in (3, 4, 2)]

    def test_constant_values(self):
        recentered = recenter_by_permutation(lambda shocks: [np.ones((len(g), 2)) for g in shocks], self.actual, 7)
        for value in recentered:
            np.testing.assert_array_equal(value, 0.0)

    def test_degenerate_permutations(self):
        def values(shocks):
            return [np.outer(g, [1.0, -2.0]) for g in shocks]

        recentered = recenter_by_permutation(values, self.actual, permutations=[self.actual] * 4)
        for value in recentered:
            np.testing.assert_allclose(value, 0.0, atol=1e-14)

    def test_linear_values_converge_to_demeaned_shocks(self):
        rng = np.random.default_rng(16)
        loadings = [rng.standard_normal((len(g), len(g))) for g in self.actual]

        def values(shocks):
            return [A @ g for A, g in zip(loadings, shocks)]

        recentered = recenter_by_permutation(values, self.actual, count=2000, scope="across_all", seed=3)
        grand_mean = np.concatenate(self.actual).mean()
        for A, g, value in zip(loadings, self.actual, recentered):
            np.testing.assert_allclose(value, A @ (g - grand_mean), atol=0.2)

    def test_scopes_preserve_shock_values(self):
        within = shock_permutations(self.actual, 3, scope=PermutationScope.WITHIN_MARKET, seed=2)
        across = shock_permutations(self.actual, 3, scope=PermutationScope.ACROSS_ALL, seed=2)
        for draw in within:
            for permuted, original in zip(draw, self.actual):
                np.testing.assert_array_equal(np.sort(permuted), np.sort(original))
        pooled = np.sort(np.concatenate(self.actual))
        for draw in across:
            self.assertEqual([len(g) for g in draw], [3, 4, 2])
            np.testing.assert_array_equal(np.sort(np.concatenate(draw)), pooled)

    def test_deterministic_given_seed(self):
        first = shock_permutations(self.actual, 4, seed=9)
        second = shock_permutations(self.actual, 4, seed=9)
        for a, b in zip(first, second):
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x, y)

    def test_seed_selects_the_permutation_substream(self):
        seeded = shock_permutations(self.actual, 3, seed=9)
        explicit = shock_permutations(self.actual, 3, rng=substream(9, "permutations"))
        for a, b in zip(seeded, explicit):
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x, y)

    def test_needs_a_permutation(self):
        with self.assertRaises(DomainError):
            shock_permutations(self.actual, 0)


# =================================== Instrument Sets ===================================
class InstrumentSetTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(100, 2, skip=1000)
        rng = np.random.default_rng(17)
        self.markets = [paired_market(rng, self.draws, J=4, region=r) for r in range(6)]
        self.theta = Theta(alpha=-2.0, sigma=[0.5, 0.5])

    def test_characteristic_sets(self):
        for kind in (InstrumentKind.BLP_SUM, InstrumentKind.GH_QUADRATIC, InstrumentKind.GH_LOCAL):
            instruments = build_instrument_set(self.markets, kind)
            self.assertEqual(instruments.n_columns, 2)
            self.assertEqual(instruments.stacked().shape, (24, 2))
        local = build_instrument_set(self.markets, "gh_local")
        np.testing.assert_allclose(local.meta["kappa"], pooled_characteristic_sd(self.markets))

    def test_cost_shock_set(self):
        instruments = build_instrument_set(self.markets, InstrumentKind.COST_SHOCK)
        np.testing.assert_array_equal(instruments.stacked()[:, 0], np.concatenate([m.g for m in self.markets]))

    def test_recentered_sets_need_preliminary_values(self):
        with self.assertRaises(DomainError):
            build_instrument_set(self.markets, InstrumentKind.RECIV_SSIV)

    def test_recentered_sets(self):
        ssiv = build_instrument_set(self.markets, "reciv_ssiv", self.theta, 0.8, self.draws)
        fiv = build_instrument_set(self.markets, "reciv_fiv", self.theta, 0.8, self.draws, permutations=5, seed=4)
        self.assertEqual(ssiv.n_columns, 3)
        self.assertEqual(fiv.n_columns, 3)
        self.assertEqual(fiv.meta["permutations"], 5)
        self.assertEqual(fiv.meta["recentering"], "across_all")
        np.testing.assert_array_equal(ssiv.stacked()[:, 0], fiv.stacked()[:, 0])

    def test_frozen_permutations(self):
        builder = RecenteredInstruments(self.markets, "reciv_fiv", self.draws, 0.8, permutations=5, seed=4)
        first, second = builder(self.theta), builder(self.theta)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_zero_shocks_give_zero_instruments(self):
        rng = np.random.default_rng(18)
        markets = [paired_market(rng, self.draws, region=r, g=np.zeros(4)) for r in range(3)]
        for kind in ("reciv_ssiv", "reciv_fiv"):
            instruments = build_instrument_set(markets, kind, self.theta, 0.8, self.draws, permutations=3)
            np.testing.assert_allclose(instruments.stacked(), 0.0, atol=1e-12)

    def test_validation(self):
        with self.assertRaises(ShapeMismatchError):
            InstrumentSet(InstrumentKind.BLP_SUM, [np.zeros((3, 2)), np.zeros((3, 1))], [(1, 2), (2, 2)])
        with self.assertRaises(DomainError):
            InstrumentSet(InstrumentKind.RECIV_SSIV, [np.zeros((3, 3))], [(1, 2)])

    def test_frame(self):
        frame = build_instrument_set(self.markets, InstrumentKind.BLP_SUM).to_frame()
        self.assertEqual(len(frame), 6 * 4 * 2)
        self.assertEqual(list(frame.columns), ["region", "period", "product", "column", "value"])

    def test_recentered_instruments_are_orthogonal_to_characteristics(self):
        rng = np.random.default_rng(19)
        markets = [paired_market(rng, self.draws, J=5, region=r) for r in range(30)]
        weights = [ssiv_weights(market, self.theta, 0.8, self.draws) for market in markets]
        x = np.vstack([market.x1 for market in markets])
        statistics = []
        for _ in range(200):
            for market in markets:
                market.g = rng.normal(scale=0.2, size=5)
            z = np.vstack([build_ssiv(market, w, 0.8) for market, w in zip(markets, weights)])
            statistics.append(z[:, 1:].T @ x / len(x))
        statistics = np.array(statistics)
        mean = statistics.mean(axis=0)
        se = statistics.std(axis=0, ddof=1) / np.sqrt(len(statistics))
        self.assertTrue(np.all(np.abs(mean) <= 4.0 * se))
