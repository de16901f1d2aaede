import json
import tempfile
from pathlib import Path

import numpy as np
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from apps.demand.exceptions import DomainError, ShapeMismatchError
from apps.demand.mixedlogit import ConsumerDraws, Theta, share_jacobian_delta, shares
from apps.demand.nestedlogit import NestedDgpConfig, NestedMarket, simulate_nested_panel
from apps.demand.solvers import substream

from .dgp import (
    ALPHA_TRUE,
    DgpConfig,
    Scenario,
    _ar1_paths,
    apply_bliss_point,
    draw_characteristics,
    draw_shocks,
    simulate_panel,
    solve_prices,
)
from .panels import read_panel, read_truth, truth_path, write_panel


def small_config(**overrides):
    values = dict(n_regions=4, n_products=5, dgp_draws=200, seed=11)
    values.update(overrides)
    return DgpConfig(**values)


def independent_foc(prices, costs, delta_exogenous, theta, x1, draws):
    """Single-product FOC ``s_j + ds_j/dp_j (p_j - c_j)`` from the share jacobian."""
    delta = delta_exogenous + theta.alpha * prices
    s = shares(delta, theta.sigma, x1, draws)
    own = theta.alpha * np.diag(share_jacobian_delta(delta, theta.sigma, x1, draws))
    return (s + own * (prices - costs)) / own


# =================================== Configuration ===================================
class DgpConfigTest(SimpleTestCase):
    def test_defaults(self):
        config = DgpConfig()
        self.assertEqual(config.n_regions, 100)
        self.assertEqual(config.n_products, 15)
        self.assertAlmostEqual(config.alpha_true, -6.7949, places=3)
        self.assertEqual(config.sigma_true, (4.0, 4.0))
        self.assertEqual(config.beta, (35.0, 2.0, 2.0))
        self.assertEqual(config.gamma, (5.0, 1.0, 1.0))

    def test_invalid_values(self):
        with self.assertRaises(DomainError):
            DgpConfig(shock_sd=-0.1)
        with self.assertRaises(DomainError):
            DgpConfig(ar_coef=1.0)
        with self.assertRaises(DomainError):
            DgpConfig(scenario=Scenario.COMMON_PRODUCTS, common_products=16)
        with self.assertRaises(DomainError):
            DgpConfig(common_products=3)

    def test_dict_roundtrip(self):
        config = small_config(scenario="common-products", common_products=2)
        self.assertEqual(DgpConfig.from_dict(json.loads(json.dumps(config.as_dict()))), config)


# =================================== Random Ingredients ===================================
class IngredientsTest(SimpleTestCase):
    def test_zero_shock_sd(self):
        self.assertFalse(np.any(draw_shocks(small_config(shock_sd=0.0))))

    def test_first_period_shocks_are_zero(self):
        g = draw_shocks(small_config())
        self.assertFalse(np.any(g[0]))
        self.assertTrue(np.all(g[1] != 0))

    def test_shock_sweep_reuses_normals(self):
        low = draw_shocks(small_config(shock_sd=0.1))
        high = draw_shocks(small_config(shock_sd=0.4))
        np.testing.assert_allclose(4.0 * low, high, rtol=1e-14)

    def test_common_products(self):
        config = small_config(scenario=Scenario.COMMON_PRODUCTS, common_products=5)
        x1 = draw_characteristics(config)
        for r in range(config.n_regions):
            np.testing.assert_array_equal(x1[r], x1[0])

    def test_partially_common_products(self):
        config = small_config(scenario=Scenario.COMMON_PRODUCTS, common_products=2)
        x1 = draw_characteristics(config)
        np.testing.assert_array_equal(x1[3, :2], x1[0, :2])
        self.assertFalse(np.allclose(x1[3, 2:], x1[0, 2:]))

    def test_ar1_moments(self):
        n = 100_000
        paths = _ar1_paths(substream(3, "taste"), DgpConfig(), (n,))
        variance = paths[1].var()
        correlation = np.corrcoef(paths[0], paths[1])[0, 1]
        self.assertLess(abs(variance - 1.0), 3.0 * np.sqrt(2.0 / n))
        self.assertLess(abs(correlation - 0.9), 3.0 * (1.0 - 0.81) / np.sqrt(n))

    def test_substreams_differ(self):
        self.assertNotEqual(substream(0, "taste").standard_normal(), substream(0, "cost").standard_normal())


# =================================== Pricing ===================================
class SolvePricesTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.pseudo_random(count=300, dims=2, seed=5)

    def test_single_product_logit_markup(self):
        theta = Theta(alpha=ALPHA_TRUE, sigma=[0.0])
        draws = ConsumerDraws.pseudo_random(count=10, dims=1, seed=1)
        costs = np.array([5.3])
        delta_exogenous = np.array([36.0])
        x1 = np.zeros((1, 1))
        prices = solve_prices(costs, delta_exogenous, theta, x1, draws)
        s = shares(delta_exogenous + theta.alpha * prices, theta.sigma, x1, draws)
        self.assertAlmostEqual(prices[0] - costs[0], -1.0 / (theta.alpha * (1.0 - s[0])), delta=1e-8)

    def test_symmetric_duopoly(self):
        theta = Theta(alpha=ALPHA_TRUE, sigma=[4.0, 4.0])
        x1 = np.array([[0.3, -0.2], [0.3, -0.2]])
        prices = solve_prices(np.array([6.0, 6.0]), np.array([40.0, 40.0]), theta, x1, self.draws)
        self.assertAlmostEqual(prices[0], prices[1], delta=1e-10)

    def test_random_market_satisfies_foc(self):
        rng = np.random.default_rng(8)
        theta = Theta(alpha=ALPHA_TRUE, sigma=[4.0, 4.0])
        x = np.column_stack([np.ones(8), rng.standard_normal((8, 2))])
        costs = x @ np.array([5.0, 1.0, 1.0]) + rng.standard_normal(8)
        delta_exogenous = x @ np.array([35.0, 2.0, 2.0]) + rng.standard_normal(8)
        prices = solve_prices(costs, delta_exogenous, theta, x[:, 1:], self.draws)
        residual = independent_foc(prices, costs, delta_exogenous, theta, x[:, 1:], self.draws)
        self.assertLess(np.max(np.abs(residual)), 1e-8)
        self.assertTrue(np.all(prices > costs))

    def test_positive_price_coefficient(self):
        with self.assertRaises(DomainError):
            solve_prices(np.ones(2), np.ones(2), Theta(alpha=1.0, sigma=[0.0]), np.zeros((2, 1)), self.draws)


# =================================== Bliss Point ===================================
class BlissPointTest(SimpleTestCase):
    def setUp(self):
        self.config = small_config(scenario=Scenario.BLISS_POINT)

    def test_zero_bliss_point(self):
        x1 = np.array([[0.5, 1.0], [-1.0, 2.0]])
        xi = np.zeros((2, 2))
        shifted, penalized = apply_bliss_point(self.config, 0.0, x1, xi)
        np.testing.assert_array_equal(shifted, x1)
        np.testing.assert_allclose(penalized, -3.0 * np.array([[0.25, 1.0], [0.25, 1.0]]))

    def test_product_at_bliss_point(self):
        shifted, penalized = apply_bliss_point(self.config, 1.5, np.array([[0.0, 0.0]]), np.array([[0.7], [0.2]]))
        self.assertEqual(shifted[0, 0], 1.5)
        np.testing.assert_array_equal(penalized, [[0.7], [0.2]])

    def test_other_scenarios_rejected(self):
        with self.assertRaises(DomainError):
            apply_bliss_point(small_config(), 0.0, np.zeros((1, 2)), np.zeros((2, 1)))


# =================================== Panels ===================================
class SimulatePanelTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = small_config()
        cls.panel = simulate_panel(cls.config)

    def test_every_market_accounted_for(self):
        self.assertEqual(len(self.panel.markets) + self.panel.n_dropped, 2 * self.config.n_regions)

    def test_shares_and_prices(self):
        for market in self.panel.markets:
            self.assertGreater(market.s0, 0.0)
            self.assertTrue(np.all(market.s > 0))
            self.assertTrue(np.all(np.isfinite(market.p)))
            self.assertEqual(market.x.shape, (5, 3))
            np.testing.assert_array_equal(market.x[:, 0], 1.0)

    def test_time_invariant_characteristics_and_lagged_links(self):
        for market in self.panel.paired_markets():
            np.testing.assert_array_equal(market.x1, market.lagged.x1)
            self.assertEqual(market.lagged.period, 1)
            self.assertFalse(np.any(market.lagged.g))

    def test_deterministic(self):
        again = simulate_panel(self.config)
        for first, second in zip(self.panel.markets, again.markets):
            self.assertEqual(first.market_id, second.market_id)
            np.testing.assert_array_equal(first.p, second.p)
            np.testing.assert_array_equal(first.s, second.s)

    def test_csv_roundtrip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path, sidecar = write_panel(self.panel, Path(tmp) / "panel.csv")
            self.assertEqual(sidecar, truth_path(path))
            panel = read_panel(path)
        self.assertEqual(panel.truth, self.config)
        self.assertEqual(len(panel.markets), len(self.panel.markets))
        for original, restored in zip(self.panel.markets, panel.markets):
            self.assertEqual(original.market_id, restored.market_id)
            np.testing.assert_array_equal(original.p, restored.p)
            np.testing.assert_array_equal(original.s, restored.s)
            np.testing.assert_array_equal(original.x1, restored.x1)
        self.assertEqual(len(panel.paired_markets()), len(self.panel.paired_markets()))


class PanelFileTest(SimpleTestCase):
    def test_missing_file(self):
        with self.assertRaises(DomainError):
            read_panel("/nonexistent/panel.csv")

    def test_missing_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.csv"
            path.write_text("region,period,product,price\n1,1,1,2.0\n")
            with self.assertRaises(ShapeMismatchError):
                read_panel(path)

    def test_nested_panel_roundtrip(self):
        panel = simulate_nested_panel(NestedDgpConfig(n_markets=5, seed=2))
        with tempfile.TemporaryDirectory() as tmp:
            path, _ = write_panel(panel, Path(tmp) / "nested.csv", model="nested")
            restored = read_panel(path)
            payload = read_truth(path)
        self.assertEqual(payload["model"], "nested")
        self.assertEqual(len(restored.paired_markets()), 5)
        for market in restored.markets:
            self.assertIsInstance(market, NestedMarket)
        original = panel.markets[0]
        restored_market = restored.paired_markets()[0]
        np.testing.assert_array_equal(original.nest, restored_market.nest)
        np.testing.assert_array_equal(original.s, restored_market.s)


# =================================== Simulate Command ===================================
class SimulateCommandTest(SimpleTestCase):
    def test_writes_panel_and_sidecar(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "panel.csv"
            call_command("simulate", out=str(out), regions=2, products=3, draws=100, seed=4, verbosity=0)
            self.assertTrue(out.exists())
            payload = json.loads(truth_path(out).read_text())
        self.assertEqual(payload["truth"]["n_regions"], 2)
        self.assertEqual(payload["truth"]["seed"], 4)

    def test_config_file_with_flag_override(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = Path(tmp) / "config.json"
            config.write_text(json.dumps({"regions": 5, "products": 3, "shock-sd": 0.3, "draws": 100}))
            out = Path(tmp) / "panel.csv"
            call_command("simulate", config=str(config), out=str(out), regions=2, verbosity=0)
            truth = read_truth(out)["truth"]
        self.assertEqual(truth["n_regions"], 2)
        self.assertEqual(truth["shock_sd"], 0.3)

    def test_invalid_options(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                call_command("simulate", out=str(Path(tmp) / "p.csv"), products=3, common=5, scenario="common-products")

    def test_nested_model(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "nested.csv"
            call_command("simulate", out=str(out), model="nested", regions=4, verbosity=0)
            self.assertEqual(read_truth(out)["model"], "nested")
