import json
import logging
from pathlib import Path

from apps.demand.exceptions import ReciVError
from apps.demand.mixedlogit import ConsumerDraws
from apps.demand.nestedlogit import estimate_nested_2sls
from apps.simulation.panels import read_panel
from core.commands import ConfigurableCommand

from ...char_iv import estimate_char_iv
from ...forms import EstimateForm
from ...gmm import ESTIMATORS
from ...inference import Clustering, gmm_standard_errors
from ...models import EstimationRun
from ...recentered import estimate_recentered

logger = logging.getLogger(__name__)

CLUSTERING = {"market": Clustering.BY_MARKET, "shock": Clustering.BY_SHOCK}


def append_json_line(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as handle:
        handle.write(json.dumps(record, sort_keys=True) + "\n")


class Command(ConfigurableCommand):
    help = "Estimate demand parameters on a panel CSV and append the result to a JSON lines file."
    form_class = EstimateForm
    settings_defaults = {"permutations": "PERMUTATIONS", "draws": "INVERSION_DRAWS", "grid_points": "GRID_POINTS"}

    def add_options(self, parser):
        parser.add_argument("--panel", help="panel CSV written by the simulate command")
        parser.add_argument("--out", help="JSON lines file to append the result to")
        parser.add_argument("--model", choices=["mixed", "nested"])
        parser.add_argument("--estimator", choices=list(ESTIMATORS))
        parser.add_argument("--mode", choices=["cu", "iterative"])
        parser.add_argument("--cluster", choices=["market", "shock"])
        parser.add_argument("--permutations", type=int)
        parser.add_argument("--seed", type=int)
        parser.add_argument("--draws", type=int, help="Halton draws used to invert shares")
        parser.add_argument("--grid-points", type=int)
        parser.add_argument("--pi-check", type=float, help="pass-through; estimated from the panel when omitted")
        parser.add_argument("--nested-instrument", choices=["relative", "weighted", "exact"])

    def run(
        self, panel, out, model, estimator, mode, cluster, permutations, seed, draws, grid_points, pi_check, **rest
    ):
        data = read_panel(panel)
        if model == "nested":
            return self.run_nested(data, panel, out, rest["nested_instrument"])

        reciv = self.reciv_settings()
        family, instrument = ESTIMATORS[estimator]
        n_sigma = data.markets[0].x1.shape[1]
        halton = ConsumerDraws.halton(count=draws, dims=n_sigma, skip=reciv.get("HALTON_SKIP", 1000))
        upper = reciv.get("GRID_UPPER", 10.0)
        if family == "char":
            result = estimate_char_iv(data.period(2), instrument, halton, grid_points=grid_points, grid_upper=upper)
        else:
            result = estimate_recentered(
                data,
                instrument,
                halton,
                mode=mode,
                grid_points=grid_points,
                grid_upper=upper,
                pi_check=pi_check,
                permutations=permutations,
                seed=seed,
            )
        if not result.converged:
            logger.warning("%s did not converge: %s", estimator, result.failure)
        else:
            try:
                gmm_standard_errors(result, CLUSTERING[cluster])
            except ReciVError as exc:
                logger.warning("%s: no standard errors: %s", estimator, exc)

        record = {"model": "mixed", "panel": str(panel), **result.as_dict()}
        append_json_line(out, record)
        EstimationRun.record(result, panel)
        self.stdout.write(
            self.style.SUCCESS(
                f"{estimator}: alpha {result.theta_hat.alpha:.4f}, sigma {result.theta_hat.sigma.round(4).tolist()}"
                f" (converged={result.converged}) appended to {out}"
            )
        )

    def run_nested(self, data, panel, out, instrument):
        estimate = estimate_nested_2sls(data.period(2), instrument=instrument)
        append_json_line(out, {"model": "nested", "panel": str(panel), **estimate.as_dict()})
        EstimationRun.objects.create(
            estimator=f"nested-{instrument}",
            mode="2sls",
            panel_path=str(panel),
            alpha=estimate.alpha,
            sigma=[estimate.sigma],
            converged=True,
            method_used="linear_gmm",
        )
        self.stdout.write(
            self.style.SUCCESS(f"nested 2SLS ({instrument}): alpha {estimate.alpha:.4f}, sigma {estimate.sigma:.4f}")
        )
