import json
import tempfile
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase, TestCase, tag
from scipy import optimize

from apps.demand.exceptions import DomainError, RankDeficiencyError, UnsupportedClusteringError
from apps.demand.mixedlogit import ConsumerDraws, Market, Theta, shares
from apps.demand.solvers import OptimizerMethod, OptimizerReport, finite_difference_jacobian, linear_gmm
from apps.instruments.recentered import build_ssiv
from apps.simulation.dgp import ALPHA_TRUE, DgpConfig, simulate_panel

from .char_iv import CharacteristicIvProblem, estimate_char_iv
from .gmm import (
    EstimationResult,
    GmmProblem,
    MomentData,
    concentrate_linear,
    inverse_softplus,
    softplus,
    softplus_derivative,
)
from .inference import (
    _shock_scores,
    aggregate_shock_residuals,
    check_aggregation_identity,
    gmm_standard_errors,
    sandwich_covariance,
)
from .models import EstimationRun
from .recentered import RecenteredProblem, estimate_cu_recentered, estimate_iterative_recentered, iterative_step


def small_panel(seed=21, **overrides):
    values = dict(n_regions=12, n_products=5, dgp_draws=200, seed=seed)
    values.update(overrides)
    return simulate_panel(DgpConfig(**values))


NOISE_FREE_BETA = np.array([33.0, 2.0, 2.0])


def noise_free_markets(sigma, draws, n_markets=40, J=6, seed=40):
    """Period-2 markets with no taste shocks, so the true parameters zero every moment."""
    rng = np.random.default_rng(seed)
    markets = []
    for region in range(1, n_markets + 1):
        x1 = rng.standard_normal((J, 2))
        x = np.column_stack([np.ones(J), x1])
        g = 0.3 * rng.standard_normal(J)
        p = 5.0 + 0.3 * x1.sum(axis=1) + g + 0.1 * rng.standard_normal(J)
        s = shares(x @ NOISE_FREE_BETA + ALPHA_TRUE * p, sigma, x1, draws)
        markets.append(Market(market_id=(region, 2), x=x, x1=x1, p=p, s=s, s0=1.0 - s.sum(), g=g))
    return markets


def fake_result(data, estimator="linear"):
    report = OptimizerReport(
        converged=True,
        iterations=1,
        final_step_norm=0.0,
        final_gradient_norm=0.0,
        objective=0.0,
        method_used=OptimizerMethod.GAUSS_NEWTON,
    )
    return EstimationResult(
        estimator=estimator,
        theta_hat=Theta(alpha=-1.0, sigma=[0.0]),
        report=report,
        objective_value=0.0,
        grid_start=np.zeros(1),
        moments=data,
    )


# =================================== Transforms ===================================
class SoftplusTest(SimpleTestCase):
    def test_values(self):
        self.assertAlmostEqual(softplus(0.0), np.log(2.0), places=15)
        self.assertGreaterEqual(softplus(-800.0), 0.0)
        self.assertGreater(softplus(-50.0), 0.0)
        self.assertLess(softplus(-50.0), 1e-20)
        self.assertEqual(softplus(1000.0), 1000.0)

    def test_derivative_matches_finite_differences(self):
        for point in (-5.0, 0.0, 5.0):
            numeric = finite_difference_jacobian(lambda u: softplus(u), np.array([point]))[0, 0]
            self.assertAlmostEqual(softplus_derivative(point), numeric, delta=1e-8)

    def test_inverse(self):
        values = np.array([1e-8, 0.3, 4.0, 40.0])
        np.testing.assert_allclose(softplus(inverse_softplus(values)), values, rtol=1e-12)
        with self.assertRaises(DomainError):
            inverse_softplus(0.0)


# =================================== Linear Concentration ===================================
class ConcentrateLinearTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(30)
        self.X = np.column_stack([np.ones(80), rng.standard_normal((80, 2))])
        self.y = rng.standard_normal(80)
        self.rng = rng

    def test_own_regressors_give_ols(self):
        ols, *_ = np.linalg.lstsq(self.X, self.y, rcond=None)
        np.testing.assert_allclose(concentrate_linear(self.y, self.X, self.X, np.eye(3)), ols, rtol=1e-10)

    def test_exact_fit(self):
        b = np.array([1.5, -2.0, 0.25])
        Z = self.X + 0.3 * self.rng.standard_normal(self.X.shape)
        np.testing.assert_allclose(concentrate_linear(self.X @ b, self.X, Z, np.eye(3)), b, rtol=1e-10)

    def test_matches_normal_equations(self):
        Z = np.column_stack([self.X, self.rng.standard_normal((80, 2))])
        weight = np.linalg.inv(Z.T @ Z / 80)
        XZ = self.X.T @ Z
        expected = np.linalg.solve(XZ @ weight @ XZ.T, XZ @ weight @ Z.T @ self.y)
        np.testing.assert_allclose(concentrate_linear(self.y, self.X, Z, weight), expected, rtol=1e-10)

    def test_columns(self):
        Y = np.column_stack([self.y, 2.0 * self.y])
        coefficients = concentrate_linear(Y, self.X, self.X, np.eye(3))
        self.assertEqual(coefficients.shape, (3, 2))
        np.testing.assert_allclose(coefficients[:, 1], 2.0 * coefficients[:, 0], rtol=1e-12)

    def test_singular_system(self):
        with self.assertRaises(RankDeficiencyError):
            concentrate_linear(self.y, self.X, np.zeros((80, 3)), np.eye(3))


# =================================== Problems ===================================
class GmmProblemTest(SimpleTestCase):
    def test_just_identified_only(self):
        with self.assertRaises(DomainError):
            GmmProblem([], "blp", "levels_period2", "zwz_inverse", None, n_moments=7, n_parameters=6)

    def test_characteristic_problem(self):
        panel = small_panel()
        problem = CharacteristicIvProblem(panel.period(2), "gh_quadratic", ConsumerDraws.halton(100, 2))
        self.assertEqual(problem.Z.shape[1], 6)
        self.assertEqual(problem.problem.n_parameters, 6)
        sigma = np.array([2.0, 3.0])
        numeric = finite_difference_jacobian(problem.moments, sigma)
        np.testing.assert_allclose(problem.moment_jacobian(sigma), numeric, rtol=1e-4, atol=1e-7)
        self.assertGreaterEqual(problem.objective(sigma), 0.0)

    def test_recentered_problem(self):
        panel = small_panel()
        problem = RecenteredProblem(panel, "ssiv", ConsumerDraws.halton(100, 2), pi_check=0.8)
        theta = Theta(alpha=-5.0, sigma=[2.0, 3.0])
        self.assertEqual(problem.moments(theta).shape, (3,))
        self.assertEqual(problem.problem.n_moments, 3)
        Z = problem.instruments(theta)
        _, _, H = problem.concentrated(Z, theta.sigma, derivative=True)
        numeric = finite_difference_jacobian(lambda s: problem.concentrated(Z, s)[1], theta.sigma)
        np.testing.assert_allclose(H, numeric, rtol=1e-4, atol=1e-7)

    def test_characteristic_problem_needs_period_two(self):
        panel = small_panel()
        with self.assertRaises(DomainError):
            CharacteristicIvProblem(panel.period(1), "blp", ConsumerDraws.halton(50, 2))

    def test_zero_shocks_are_a_rank_error(self):
        panel = small_panel(shock_sd=0.0)
        with self.assertRaises(RankDeficiencyError):
            estimate_cu_recentered(panel, "ssiv", ConsumerDraws.halton(50, 2), pi_check=0.8, grid_points=3)

    def test_zero_shocks_without_pass_through_are_a_rank_error(self):
        panel = small_panel(shock_sd=0.0)
        with self.assertRaises(RankDeficiencyError) as caught:
            RecenteredProblem(panel, "ssiv", ConsumerDraws.halton(50, 2))
        self.assertEqual(caught.exception.context, "recentered ssiv pass-through")


# =================================== Characteristic Estimators ===================================
class CharacteristicRecoveryTest(SimpleTestCase):
    def setUp(self):
        self.draws = ConsumerDraws.halton(100, 2)

    def test_recovers_random_coefficients_without_taste_shocks(self):
        sigma = np.array([1.0, 1.5])
        result = estimate_char_iv(noise_free_markets(sigma, self.draws), "gh_quadratic", self.draws)
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.theta_hat.sigma, sigma, atol=1e-3)
        self.assertAlmostEqual(result.theta_hat.alpha, ALPHA_TRUE, delta=1e-3)
        np.testing.assert_allclose(result.beta_hat, NOISE_FREE_BETA, atol=1e-2)

    def test_plain_logit_panel(self):
        markets = noise_free_markets(np.zeros(2), self.draws)
        problem = CharacteristicIvProblem(markets, "gh_quadratic", self.draws)
        self.assertLess(problem.objective(np.zeros(2)), 1e-16)
        coefficients = problem.linear_parameters(np.zeros(2))
        self.assertAlmostEqual(coefficients[0], ALPHA_TRUE, delta=1e-8)
        np.testing.assert_allclose(coefficients[1:], NOISE_FREE_BETA, atol=1e-7)

        result = estimate_char_iv(markets, "gh_quadratic", self.draws)
        self.assertTrue(np.all(result.theta_hat.sigma < 0.25))
        self.assertAlmostEqual(result.theta_hat.alpha, ALPHA_TRUE, delta=0.15)
        np.testing.assert_allclose(result.beta_hat, NOISE_FREE_BETA, atol=1.0)


# =================================== Shock Aggregation ===================================
class AggregationTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(31)
        sizes = (4, 3, 5)
        self.markets = [SimpleNamespace(market_id=(r, 2), J=J, g=rng.standard_normal(J)) for r, J in enumerate(sizes)]
        self.weights = [rng.standard_normal((J, J, 2)) for J in sizes]
        self.residuals = [rng.standard_normal(J) for J in sizes]

    def test_zero_residuals(self):
        aggregated, total = aggregate_shock_residuals(self.markets, self.weights, [np.zeros(m.J) for m in self.markets])
        for value in aggregated:
            np.testing.assert_array_equal(value, 0.0)
        np.testing.assert_array_equal(total, 0.0)

    def test_diagonal_weights(self):
        market = self.markets[0]
        diagonal = np.array([1.0, 2.0, -1.0, 0.5])
        weights = np.repeat(np.diag(diagonal)[:, :, None], 2, axis=2)
        aggregated, _ = aggregate_shock_residuals([market], [weights], [self.residuals[0]])
        np.testing.assert_allclose(aggregated[0][:, 0], diagonal * self.residuals[0])

    def test_reordering_identity(self):
        self.assertLess(check_aggregation_identity(self.markets, self.weights, self.residuals), 1e-10)
        brute = np.zeros(2)
        for market, w, r in zip(self.markets, self.weights, self.residuals):
            for j in range(market.J):
                for k in range(market.J):
                    brute += w[j, k] * market.g[k] * r[j]
        _, total = aggregate_shock_residuals(self.markets, self.weights, self.residuals)
        np.testing.assert_allclose(total, brute, rtol=1e-10, atol=1e-12)

    def test_shock_scores_add_up_to_the_moments(self):
        Z = np.vstack([build_ssiv(m, w, 0.7) for m, w in zip(self.markets, self.weights)])
        data = MomentData(
            Z=Z,
            residuals=np.concatenate(self.residuals),
            residual_jacobian=np.zeros((Z.shape[0], 3)),
            weight=np.eye(3),
            market_index=np.concatenate([np.full(m.J, i) for i, m in enumerate(self.markets)]),
            parameter_names=["alpha", "sigma1", "sigma2"],
            ssiv={"pi_check": 0.7, "weights": self.weights, "shocks": [m.g for m in self.markets]},
        )
        np.testing.assert_allclose(_shock_scores(data).sum(axis=0), Z.T @ data.residuals, rtol=1e-10, atol=1e-12)


# =================================== Standard Errors ===================================
class StandardErrorTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(32)
        N = 400
        z = rng.standard_normal(N)
        error = rng.standard_normal(N)
        p = 0.8 * z + 0.5 * error + rng.standard_normal(N)
        self.X = np.column_stack([np.ones(N), p])
        self.Z = np.column_stack([np.ones(N), z])
        y = self.X @ np.array([1.0, -2.0]) + error
        b = linear_gmm(y, self.X, self.Z)
        self.residuals = y - self.X @ b
        self.N = N

    def data(self, Z, residuals, X, clusters):
        return MomentData(
            Z=Z,
            residuals=residuals,
            residual_jacobian=-X,
            weight=np.linalg.inv(Z.T @ Z / Z.shape[0]),
            market_index=clusters,
            parameter_names=["b0", "b1"],
        )

    def test_matches_robust_iv_formula(self):
        result = fake_result(self.data(self.Z, self.residuals, self.X, np.arange(self.N)))
        se = gmm_standard_errors(result, "by_market")
        inverse = np.linalg.inv(self.Z.T @ self.X)
        meat = (self.Z * self.residuals[:, None] ** 2).T @ self.Z
        expected = np.sqrt(np.diag(inverse @ meat @ inverse.T))
        np.testing.assert_allclose([se["b0"], se["b1"]], expected, rtol=1e-10)
        self.assertEqual(result.clustering, "by_market")

    def test_duplicated_markets(self):
        clusters = np.arange(self.N) // 5
        single = gmm_standard_errors(fake_result(self.data(self.Z, self.residuals, self.X, clusters)))
        doubled = self.data(
            np.vstack([self.Z, self.Z]),
            np.concatenate([self.residuals, self.residuals]),
            np.vstack([self.X, self.X]),
            np.concatenate([clusters, clusters + clusters.max() + 1]),
        )
        twice = gmm_standard_errors(fake_result(doubled))
        for name in ("b0", "b1"):
            self.assertAlmostEqual(twice[name], single[name] / np.sqrt(2.0), delta=1e-12 + 1e-10 * single[name])

    def test_too_few_clusters(self):
        with self.assertRaises(UnsupportedClusteringError):
            sandwich_covariance(np.eye(2), np.eye(2), np.ones((1, 2)), 10)

    def test_shock_clustering_needs_weights(self):
        result = fake_result(self.data(self.Z, self.residuals, self.X, np.arange(self.N)))
        with self.assertRaises(UnsupportedClusteringError):
            gmm_standard_errors(result, "by_shock")

    def test_needs_moment_data(self):
        with self.assertRaises(DomainError):
            gmm_standard_errors(fake_result(None))


# =================================== Recentered Estimators ===================================
@tag("slow")
class RecenteredEstimatorTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.panel = small_panel(seed=33, n_regions=40, n_products=8)
        cls.draws = ConsumerDraws.halton(100, 2)

    def test_pass_through_scale_does_not_move_estimates(self):
        base = estimate_cu_recentered(self.panel, "ssiv", self.draws, pi_check=0.8, grid_points=10)
        scaled = estimate_cu_recentered(self.panel, "ssiv", self.draws, pi_check=8.0, grid_points=10)
        self.assertAlmostEqual(base.theta_hat.alpha, scaled.theta_hat.alpha, delta=1e-6)
        np.testing.assert_allclose(base.theta_hat.sigma, scaled.theta_hat.sigma, atol=1e-6)
        self.assertLess(base.theta_hat.alpha, 0.0)

    def test_frozen_instruments_match_direct_solve(self):
        truth = self.panel.truth.theta
        problem = RecenteredProblem(self.panel, "ssiv", self.draws, pi_check=0.8)
        Z = problem.instruments(truth)
        Zc = Z - Z.mean(axis=0)

        def moments(params):
            difference, _ = problem.first_differences(params[1:])
            y = difference - difference.mean()
            x = problem.price_change - problem.price_change.mean()
            return Zc.T @ (y - params[0] * x) / problem.N

        direct = optimize.root(moments, np.concatenate([[truth.alpha], truth.sigma]), method="hybr", tol=1e-12)
        self.assertTrue(direct.success)
        theta, report, _, failure = iterative_step(problem, truth)
        self.assertIsNone(failure)
        self.assertAlmostEqual(theta.alpha, direct.x[0], delta=1e-5)
        np.testing.assert_allclose(theta.sigma, direct.x[1:], atol=1e-5)

    def test_iterative_fixed_point(self):
        result = estimate_iterative_recentered(self.panel, "ssiv", self.draws, pi_check=0.8, grid_points=10)
        self.assertTrue(result.converged)
        self.assertEqual(result.outer_iterations, len(result.meta["outer_log"]))
        problem = RecenteredProblem(self.panel, "ssiv", self.draws, pi_check=0.8)
        again, _, _, _ = iterative_step(problem, result.theta_hat)
        np.testing.assert_allclose(again.sigma, result.theta_hat.sigma, atol=1e-6)
        se = gmm_standard_errors(result, "by_shock")
        self.assertEqual(sorted(se), ["alpha", "sigma1", "sigma2"])

    def test_iterative_agrees_with_continuously_updating(self):
        cu = estimate_cu_recentered(self.panel, "ssiv", self.draws, pi_check=0.8, grid_points=10)
        iterative = estimate_iterative_recentered(self.panel, "ssiv", self.draws, pi_check=0.8, grid_points=10)
        self.assertTrue(cu.converged and iterative.converged)
        se = gmm_standard_errors(cu, "by_market")
        self.assertLess(abs(iterative.theta_hat.alpha - cu.theta_hat.alpha), 2.0 * se["alpha"])
        for index, (a, b) in enumerate(zip(cu.theta_hat.sigma, iterative.theta_hat.sigma), start=1):
            self.assertLess(abs(a - b), 2.0 * se[f"sigma{index}"])


# =================================== Estimate Command ===================================
class EstimateCommandTest(TestCase):
    def write_panel(self, tmp, model="mixed"):
        out = Path(tmp) / "panel.csv"
        call_command("simulate", out=str(out), model=model, regions=8, products=4, draws=100, seed=5, verbosity=0)
        return out

    def test_characteristic_estimate(self):
        with tempfile.TemporaryDirectory() as tmp:
            panel = self.write_panel(tmp)
            out = Path(tmp) / "results.jsonl"
            call_command(
                "estimate",
                panel=str(panel),
                out=str(out),
                estimator="char-gh-quad",
                draws=50,
                grid_points=4,
                verbosity=0,
            )
            records = [json.loads(line) for line in out.read_text().splitlines()]
        self.assertEqual(len(records), 1)
        self.assertEqual(records[0]["estimator"], "char-gh-quad")
        self.assertEqual(len(records[0]["sigma"]), 2)
        self.assertEqual(EstimationRun.objects.count(), 1)

    def test_nested_estimate(self):
        with tempfile.TemporaryDirectory() as tmp:
            panel = self.write_panel(tmp, model="nested")
            out = Path(tmp) / "results.jsonl"
            call_command("estimate", panel=str(panel), out=str(out), model="nested", verbosity=0)
            record = json.loads(out.read_text().splitlines()[0])
        self.assertEqual(record["model"], "nested")
        self.assertEqual(record["instrument"], "relative")
        self.assertEqual(EstimationRun.objects.get().estimator, "nested-relative")

    def test_shock_clustering_needs_shift_share(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                call_command(
                    "estimate",
                    panel=str(Path(tmp) / "panel.csv"),
                    out=str(Path(tmp) / "out.jsonl"),
                    estimator="char-blp",
                    cluster="shock",
                    verbosity=0,
                )

    def test_missing_panel(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                call_command("estimate", panel=str(Path(tmp) / "missing.csv"), out=str(Path(tmp) / "o.jsonl"))
