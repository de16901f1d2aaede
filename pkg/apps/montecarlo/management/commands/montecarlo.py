import logging
import math
from multiprocessing import Pool
from pathlib import Path

from django.db import transaction

from apps.demand.exceptions import ReciVError
from core.commands import ConfigurableCommand

from ...figures import emit_figure_data
from ...forms import MonteCarloForm
from ...harness import ExperimentSpec, run_experiment
from ...models import Experiment, SimulationOutcome

logger = logging.getLogger(__name__)


def _nullable(value):
    return None if value is None or (isinstance(value, float) and math.isnan(value)) else float(value)


class Command(ConfigurableCommand):
    help = "Run a Monte Carlo experiment: raw CSV, summary JSON and optionally box-plot data."
    form_class = MonteCarloForm
    settings_defaults = {
        "workers": "WORKERS",
        "permutations": "PERMUTATIONS",
        "draws": "INVERSION_DRAWS",
        "dgp_draws": "DGP_DRAWS",
        "grid_points": "GRID_POINTS",
        "out": "OUTPUT_DIR",
    }

    def add_options(self, parser):
        parser.add_argument("--experiment", choices=["baseline", "shock-sweep", "common-sweep", "bliss"])
        parser.add_argument("--scale", choices=["full", "desk"])
        parser.add_argument("--sims", type=int)
        parser.add_argument("--regions", type=int)
        parser.add_argument("--products", type=int)
        parser.add_argument("--seed", type=int, help="master seed")
        parser.add_argument("--estimators", nargs="+")
        parser.add_argument("--workers", type=int)
        parser.add_argument("--out", help="output directory")
        parser.add_argument("--figure", action="store_true", default=None, help="also write figure CSV")
        parser.add_argument("--mode", choices=["cu", "iterative"])
        parser.add_argument("--permutations", type=int)
        parser.add_argument("--draws", type=int, help="Halton draws used to invert shares")
        parser.add_argument("--dgp-draws", type=int)
        parser.add_argument("--grid-points", type=int)

    def build_spec(self, options):
        reciv = self.reciv_settings()
        values = {
            "master_seed": options["seed"],
            "estimators": tuple(options["estimators"]),
            "output_dir": str(options["out"]),
            "mode": options["mode"],
            "permutations": options["permutations"],
            "inversion_draws": options["draws"],
            "dgp_draws": options["dgp_draws"],
            "grid_points": options["grid_points"],
            "grid_upper": reciv.get("GRID_UPPER", 10.0),
            "halton_skip": reciv.get("HALTON_SKIP", 1000),
        }
        if options["sims"]:
            values["n_sims"] = options["sims"]
        if options["regions"]:
            values["n_regions"] = options["regions"]
        if options["products"]:
            values["dgp_overrides"] = {"n_products": options["products"]}
        return ExperimentSpec.at_scale(options["experiment"], options["scale"], **values)

    def run(self, **options):
        spec = self.build_spec(options)
        record = Experiment.objects.create(
            kind=spec.experiment.value,
            scale=options["scale"],
            n_sims=spec.n_sims,
            master_seed=spec.master_seed,
            estimators=list(spec.estimators),
            output_dir=spec.output_dir,
        )
        try:
            if options["workers"] > 1:
                with Pool(options["workers"]) as pool:
                    summary, raw = run_experiment(spec, pool=pool)
            else:
                summary, raw = run_experiment(spec)
        except ReciVError:
            record.status = "failed"
            record.save()
            raise

        with transaction.atomic():
            record.summary = summary.as_dict()
            record.status = "finished"
            record.save()
            SimulationOutcome.objects.bulk_create(
                SimulationOutcome(
                    experiment=record,
                    point=row.point,
                    sim=int(row.sim),
                    estimator=row.estimator,
                    parameter=row.parameter,
                    estimate=_nullable(row.estimate),
                    se=_nullable(row.se),
                    truth=float(row.truth),
                    converged=bool(row.converged),
                    failure=row.failure if isinstance(row.failure, str) else "",
                )
                for row in raw.itertuples(index=False)
            )

        if options["figure"]:
            path = Path(spec.output_dir) / f"figure{spec.experiment.figure}.csv"
            emit_figure_data(summary, spec.experiment, estimators=spec.estimators, path=path)

        failed = sum(row["n_failed"] for row in summary.rows)
        self.stdout.write(
            self.style.SUCCESS(
                f"{spec.experiment.value}: {len(summary.rows)} summary rows written to {spec.output_dir}"
                f" ({failed} failed estimates)"
            )
        )
