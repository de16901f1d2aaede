import json
import tempfile
from multiprocessing import Pool
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase, TestCase, tag
from django.urls import reverse

from apps.demand.exceptions import DomainError
from apps.simulation.dgp import ALPHA_TRUE, Scenario

from .figures import FIGURE_COLUMNS, GAP, emit_figure_data
from .harness import (
    DEFAULT_ESTIMATORS,
    PERCENTILES,
    RAW_COLUMNS,
    ExperimentKind,
    ExperimentSpec,
    SummaryTable,
    experiment_paths,
    run_experiment,
    simulation_seed,
)
from .models import Experiment, SimulationOutcome

TINY = dict(
    n_sims=1,
    n_regions=6,
    inversion_draws=30,
    dgp_draws=100,
    grid_points=3,
    dgp_overrides={"n_products": 4},
)


def tiny_spec(tmp, experiment="baseline", estimators=("char-blp",), **overrides):
    values = dict(TINY, output_dir=str(tmp), estimators=estimators)
    values.update(overrides)
    return ExperimentSpec(experiment=experiment, **values)


def raw_frame(estimates, converged, point="baseline", estimator="char-blp", parameter="alpha", truth=ALPHA_TRUE):
    rows = [
        {
            "point": point,
            "sim": sim,
            "seed": sim,
            "estimator": estimator,
            "parameter": parameter,
            "estimate": value,
            "se": np.nan,
            "truth": truth,
            "converged": ok,
            "failure": "" if ok else "ConvergenceError: no finite grid point",
            "n_dropped": 0,
        }
        for sim, (value, ok) in enumerate(zip(estimates, converged))
    ]
    return pd.DataFrame(rows, columns=RAW_COLUMNS)


# =================================== Experiment Spec ===================================
class ExperimentSpecTest(SimpleTestCase):
    def test_needs_a_simulation(self):
        with self.assertRaises(DomainError):
            ExperimentSpec(experiment="baseline", n_sims=0)

    def test_sweeps_need_a_grid(self):
        with self.assertRaises(DomainError):
            ExperimentSpec(experiment="shock-sweep", grid=())

    def test_unknown_estimator(self):
        with self.assertRaises(DomainError):
            ExperimentSpec(experiment="baseline", estimators=("char-xyz",))

    def test_sweep_points(self):
        shock = ExperimentSpec(experiment="shock-sweep").points()
        labels = [label for label, _ in shock]
        self.assertEqual(labels, ["shock_sd=0.1", "shock_sd=0.2", "shock_sd=0.3", "shock_sd=0.4"])
        self.assertTrue(all(overrides["scenario"] is Scenario.SHOCK_SWEEP for _, overrides in shock))
        common = ExperimentSpec(experiment="common-sweep").points()
        self.assertEqual([overrides["common_products"] for _, overrides in common], [0, 5, 10, 15])
        self.assertEqual(ExperimentSpec(experiment="bliss").points()[0][1]["scenario"], Scenario.BLISS_POINT)

    def test_scales(self):
        desk = ExperimentSpec.at_scale("baseline", "desk")
        self.assertEqual((desk.n_sims, desk.n_regions), (50, 50))
        full = ExperimentSpec.at_scale(ExperimentKind.BLISS, "full", n_sims=3)
        self.assertEqual((full.n_sims, full.n_regions), (3, 100))
        with self.assertRaises(DomainError):
            ExperimentSpec.at_scale("baseline", "huge")

    def test_simulation_seeds(self):
        self.assertEqual(simulation_seed(7, 3), simulation_seed(7, 3))
        self.assertNotEqual(simulation_seed(7, 3), simulation_seed(7, 4))
        self.assertNotEqual(simulation_seed(7, 3), simulation_seed(8, 3))

    def test_sweep_points_share_the_simulation_seed(self):
        spec = ExperimentSpec(experiment="shock-sweep", master_seed=4)
        configs = [spec.dgp_config(2, overrides) for _, overrides in spec.points()]
        self.assertEqual({config.seed for config in configs}, {simulation_seed(4, 2)})
        self.assertEqual([config.shock_sd for config in configs], [0.1, 0.2, 0.3, 0.4])

    def test_estimators_do_not_touch_the_dgp(self):
        one = ExperimentSpec(experiment="baseline", estimators=("char-blp",))
        two = ExperimentSpec(experiment="baseline", estimators=("reciv-ssiv", "char-gh-quad"))
        self.assertEqual(one.dgp_config(5, {}), two.dgp_config(5, {}))


# =================================== Summary Table ===================================
class SummaryTableTest(SimpleTestCase):
    def test_percentiles_skip_failures(self):
        frame = raw_frame([1.0, 2.0, 3.0, 4.0, np.nan, 100.0], [True, True, True, True, False, False])
        row = SummaryTable.from_frame(frame).cell("baseline", "char-blp", "alpha")
        self.assertEqual((row["n_converged"], row["n_failed"]), (4, 2))
        self.assertAlmostEqual(row["p50"], 2.5)
        self.assertAlmostEqual(row["mean"], 2.5)
        values = [row[f"p{percentile}"] for percentile in PERCENTILES]
        self.assertEqual(values, sorted(values))

    def test_all_failed(self):
        row = SummaryTable.from_frame(raw_frame([np.nan, np.nan], [False, False])).rows[0]
        self.assertEqual((row["n_converged"], row["n_failed"]), (0, 2))
        self.assertIsNone(row["p50"])
        self.assertIsNone(row["mean"])

    def test_point_order_is_kept(self):
        frame = pd.concat(
            [raw_frame([1.0], [True], point="shock_sd=0.4"), raw_frame([1.0], [True], point="shock_sd=0.1")]
        )
        self.assertEqual(SummaryTable.from_frame(frame).points, ["shock_sd=0.4", "shock_sd=0.1"])

    def test_empty(self):
        self.assertEqual(SummaryTable.from_frame(pd.DataFrame(columns=RAW_COLUMNS)).rows, [])

    def test_write_and_read(self):
        table = SummaryTable.from_frame(raw_frame([1.0, 2.0], [True, True]), experiment="baseline")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "summary.json"
            table.write(path)
            self.assertEqual(SummaryTable.read(path), table)


# =================================== Figure Data ===================================
class FigureDataTest(SimpleTestCase):
    def test_empty_table_writes_the_header(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "figure1.csv"
            emit_figure_data(SummaryTable(rows=[]), 1, path=path)
            self.assertEqual(path.read_text().strip(), ",".join(FIGURE_COLUMNS))

    def test_rows_pass_the_table_through(self):
        frame = pd.concat(
            [
                raw_frame([-6.5, -7.0, -6.9], [True, True, True]),
                raw_frame([3.5, 4.2, 4.0], [True, True, True], parameter="sigma1", truth=4.0),
                raw_frame([3.9, 4.1, 4.4], [True, True, True], parameter="sigma2", truth=4.0),
            ]
        )
        table = SummaryTable.from_frame(frame)
        data = emit_figure_data(table, ExperimentKind.BASELINE, estimators=("char-blp",))
        self.assertEqual(len(data), 3 * len(PERCENTILES))
        alpha = data[data["parameter"] == "alpha"].set_index("percentile")
        cell = table.cell("baseline", "char-blp", "alpha")
        for percentile in PERCENTILES:
            self.assertEqual(alpha.loc[f"p{percentile}", "value"], cell[f"p{percentile}"])
        self.assertTrue((alpha["truth"] == ALPHA_TRUE).all())
        self.assertAlmostEqual(ALPHA_TRUE, -6.7946, places=4)
        self.assertTrue((data[data["parameter"] == "sigma1"]["truth"] == 4.0).all())

    def test_missing_estimator_gets_a_gap_row(self):
        table = SummaryTable.from_frame(raw_frame([1.0], [True]))
        data = emit_figure_data(table, 1, estimators=("char-blp", "reciv-ssiv"))
        gaps = data[data["estimator"] == "reciv-ssiv"]
        self.assertEqual(len(gaps), 3)
        self.assertTrue((gaps["percentile"] == GAP).all())
        self.assertTrue(gaps["value"].isna().all())

    def test_unknown_figure(self):
        with self.assertRaises(DomainError):
            emit_figure_data(SummaryTable(rows=[]), 5)


# =================================== Run Experiment ===================================
class RunExperimentTest(SimpleTestCase):
    def test_repeat_runs_are_identical(self):
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            run_experiment(tiny_spec(first, master_seed=3))
            run_experiment(tiny_spec(second, master_seed=3))
            raw_first, summary_first = experiment_paths(tiny_spec(first))
            raw_second, summary_second = experiment_paths(tiny_spec(second))
            self.assertEqual(raw_first.read_bytes(), raw_second.read_bytes())
            self.assertEqual(json.loads(summary_first.read_text()), json.loads(summary_second.read_text()))

    def test_estimator_list_leaves_other_estimates_alone(self):
        with tempfile.TemporaryDirectory() as tmp:
            _, alone = run_experiment(tiny_spec(Path(tmp) / "a", master_seed=1))
            _, together = run_experiment(
                tiny_spec(Path(tmp) / "b", master_seed=1, estimators=("char-gh-quad", "char-blp"))
            )
        together = together[together["estimator"] == "char-blp"].reset_index(drop=True)
        pd.testing.assert_frame_equal(alone, together)

    def test_shock_sweep_has_four_points(self):
        with tempfile.TemporaryDirectory() as tmp:
            summary, raw = run_experiment(tiny_spec(tmp, experiment="shock-sweep"))
        self.assertEqual(summary.points, ["shock_sd=0.1", "shock_sd=0.2", "shock_sd=0.3", "shock_sd=0.4"])
        self.assertEqual(len(raw), 4 * 3)

    def test_failures_are_recorded(self):
        with tempfile.TemporaryDirectory() as tmp:
            spec = tiny_spec(
                tmp, n_sims=2, estimators=("reciv-ssiv",), dgp_overrides={"n_products": 4, "shock_sd": 0.0}
            )
            summary, raw = run_experiment(spec)
        self.assertFalse(raw["converged"].any())
        self.assertTrue(raw["failure"].str.startswith("RankDeficiencyError").all())
        for row in summary.rows:
            self.assertEqual(row["n_converged"] + row["n_failed"], 2)
            self.assertIsNone(row["p50"])

    def test_failure_accounting(self):
        with tempfile.TemporaryDirectory() as tmp:
            summary, _ = run_experiment(tiny_spec(tmp, n_sims=2, estimators=("char-blp", "char-gh-local")))
        self.assertEqual(len(summary.rows), 2 * 3)
        for row in summary.rows:
            self.assertEqual(row["n_converged"] + row["n_failed"], 2)


def run_at_desk_scale(experiment, estimators, **overrides):
    """Run an experiment at desk scale (50 simulations of 50 regions), in parallel when configured."""
    with tempfile.TemporaryDirectory() as tmp:
        spec = ExperimentSpec.at_scale(experiment, "desk", estimators=estimators, output_dir=tmp, **overrides)
        workers = settings.RECIV["WORKERS"]
        if workers > 1:
            with Pool(workers) as pool:
                return run_experiment(spec, pool=pool)
        return run_experiment(spec)


def interquartile_range(figure, point, estimator, parameter="sigma1"):
    cell = figure[(figure["point"] == point) & (figure["estimator"] == estimator) & (figure["parameter"] == parameter)]
    values = dict(zip(cell["percentile"], cell["value"]))
    return values["p75"] - values["p25"]


@tag("slow")
class AcceptanceTest(SimpleTestCase):
    def test_baseline_medians_are_near_the_truth(self):
        summary, _ = run_at_desk_scale("baseline", DEFAULT_ESTIMATORS)
        for estimator in ("reciv-ssiv", "reciv-fiv", "char-gh-quad", "char-gh-local"):
            with self.subTest(estimator=estimator):
                self.assertLessEqual(abs(summary.cell("baseline", estimator, "alpha")["p50"] - ALPHA_TRUE), 0.35)
                for parameter in ("sigma1", "sigma2"):
                    self.assertLessEqual(abs(summary.cell("baseline", estimator, parameter)["p50"] - 4.0), 0.6)
        for parameter in ("alpha", "sigma1", "sigma2"):
            with self.subTest(estimator="char-blp", parameter=parameter):
                cell = summary.cell("baseline", "char-blp", parameter)
                self.assertLessEqual(abs(cell["p50"] - cell["truth"]), 0.25 * abs(cell["truth"]))

    def test_bliss_point_collapses_differentiation_sigma(self):
        summary, raw = run_at_desk_scale("bliss", ("char-gh-quad", "char-gh-local", "reciv-ssiv"))
        for estimator in ("char-gh-quad", "char-gh-local"):
            with self.subTest(estimator=estimator):
                sigma = raw[
                    (raw["estimator"] == estimator) & (raw["parameter"] == "sigma1") & raw["converged"].astype(bool)
                ]["estimate"]
                self.assertGreater(len(sigma), 0)
                self.assertGreaterEqual((sigma <= 0.1).mean(), 0.9)
        sigma = summary.cell("bliss", "reciv-ssiv", "sigma1")["p50"]
        self.assertTrue(3.0 <= sigma <= 5.0, sigma)
        alpha = summary.cell("bliss", "reciv-ssiv", "alpha")["p50"]
        self.assertLessEqual(abs(alpha - ALPHA_TRUE), 0.1 * abs(ALPHA_TRUE))

    def test_more_shock_variation_tightens_shift_share_sigma(self):
        summary, _ = run_at_desk_scale("shock-sweep", ("reciv-ssiv",), grid=(0.1, 0.2, 0.4))
        figure = emit_figure_data(summary, 2, estimators=("reciv-ssiv",))
        ranges = [interquartile_range(figure, point, "reciv-ssiv") for point in summary.points]
        self.assertEqual(summary.points, ["shock_sd=0.1", "shock_sd=0.2", "shock_sd=0.4"])
        self.assertGreater(ranges[0], ranges[1])
        self.assertGreater(ranges[1], ranges[2])

    def test_common_products_spread_differentiation_but_not_shift_share(self):
        estimators = ("char-gh-quad", "char-gh-local", "reciv-ssiv")
        summary, _ = run_at_desk_scale("common-sweep", estimators, grid=(0, 10, 15))
        figure = emit_figure_data(summary, 3, estimators=estimators)
        self.assertEqual(summary.points, ["common=0", "common=10", "common=15"])
        for estimator in ("char-gh-quad", "char-gh-local"):
            with self.subTest(estimator=estimator):
                ranges = [interquartile_range(figure, point, estimator) for point in summary.points]
                self.assertLessEqual(ranges[0], ranges[1])
                self.assertLessEqual(ranges[1], ranges[2])
        ranges = [interquartile_range(figure, point, "reciv-ssiv") for point in summary.points]
        for spread in ranges[1:]:
            self.assertLess(abs(spread - ranges[0]), 0.5 * ranges[0])


# =================================== Command and Views ===================================
class MonteCarloCommandTest(TestCase):
    def run_command(self, out, **options):
        values = dict(
            experiment="baseline",
            sims=1,
            regions=6,
            products=4,
            estimators=["char-blp"],
            draws=30,
            dgp_draws=100,
            grid_points=3,
            out=str(out),
            verbosity=0,
        )
        values.update(options)
        call_command("montecarlo", **values)

    def test_records_the_experiment(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.run_command(tmp, figure=True)
            self.assertTrue((Path(tmp) / "baseline_raw.csv").exists())
            self.assertTrue((Path(tmp) / "baseline_summary.json").exists())
            figure = pd.read_csv(Path(tmp) / "figure1.csv")
        experiment = Experiment.objects.get()
        self.assertEqual((experiment.kind, experiment.status, experiment.n_sims), ("baseline", "finished", 1))
        self.assertEqual(SimulationOutcome.objects.filter(experiment=experiment).count(), 3)
        self.assertEqual(len(experiment.summary["rows"]), 3)
        self.assertEqual(set(figure["parameter"]), {"alpha", "sigma1", "sigma2"})

    def test_invalid_options(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                self.run_command(tmp, sims=0)
            with self.assertRaises(CommandError):
                self.run_command(tmp, estimators=["char-xyz"])
        self.assertFalse(Experiment.objects.exists())

    def test_config_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = Path(tmp) / "config.json"
            config.write_text(json.dumps({"seed": 9, "experiment": "bliss"}))
            self.run_command(tmp, experiment=None, config=str(config))
        self.assertEqual((Experiment.objects.get().kind, Experiment.objects.get().master_seed), ("bliss", 9))


class ExperimentViewTest(TestCase):
    def setUp(self):
        self.experiment = Experiment.objects.create(
            kind="baseline",
            n_sims=1,
            output_dir="/tmp/out",
            status="finished",
            summary={"experiment": "baseline", "rows": []},
        )
        SimulationOutcome.objects.create(
            experiment=self.experiment,
            point="baseline",
            sim=0,
            estimator="char-blp",
            parameter="alpha",
            estimate=None,
            truth=ALPHA_TRUE,
            converged=False,
            failure="ConvergenceError: no finite grid point",
        )

    def test_list(self):
        response = self.client.get(reverse("experiment_list"))
        self.assertEqual(response.status_code, 200)
        self.assertEqual([item["id"] for item in response.json()["experiments"]], [self.experiment.pk])
        filtered = self.client.get(reverse("experiment_list"), {"kind": "bliss"})
        self.assertEqual(filtered.json()["experiments"], [])

    def test_detail(self):
        response = self.client.get(reverse("experiment_detail", args=[self.experiment.pk]))
        self.assertEqual(response.status_code, 200)
        self.assertEqual((response.json()["n_outcomes"], response.json()["n_failed"]), (1, 1))

    def test_detail_not_found(self):
        self.assertEqual(self.client.get(reverse("experiment_detail", args=[999])).status_code, 404)

    def test_read_only(self):
        self.assertEqual(self.client.post(reverse("experiment_list")).status_code, 405)
