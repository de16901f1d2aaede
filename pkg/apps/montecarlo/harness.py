"""Monte Carlo driver: simulate, estimate with every requested estimator, summarize.

Each simulation draws its panel from a seed derived only from the master seed and
the simulation index, so the estimator list never changes the simulated data and
the sweep points of one simulation share their underlying normals.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from apps.demand.exceptions import DomainError, ReciVError
from apps.demand.mixedlogit import ConsumerDraws
from apps.estimation.char_iv import estimate_char_iv
from apps.estimation.gmm import ESTIMATORS
from apps.estimation.inference import Clustering, gmm_standard_errors
from apps.estimation.recentered import estimate_recentered
from apps.simulation.dgp import DgpConfig, Scenario, simulate_panel

logger = logging.getLogger(__name__)

SHOCK_SD_GRID = (0.1, 0.2, 0.3, 0.4)
COMMON_PRODUCTS_GRID = (0, 5, 10, 15)
DEFAULT_ESTIMATORS = ("reciv-ssiv", "reciv-fiv", "char-gh-quad", "char-gh-local", "char-blp")
SCALES = {"full": {"n_sims": 100, "n_regions": 100}, "desk": {"n_sims": 50, "n_regions": 50}}
PERCENTILES = (10, 25, 50, 75, 90)
RAW_COLUMNS = [
    "point",
    "sim",
    "seed",
    "estimator",
    "parameter",
    "estimate",
    "se",
    "truth",
    "converged",
    "failure",
    "n_dropped",
]


class ExperimentKind(Enum):
    BASELINE = "baseline"
    SHOCK_SWEEP = "shock-sweep"
    COMMON_SWEEP = "common-sweep"
    BLISS = "bliss"

    @property
    def figure(self):
        return {"baseline": 1, "shock-sweep": 2, "common-sweep": 3, "bliss": 4}[self.value]


def simulation_seed(master_seed, sim):
    return int(np.random.SeedSequence([master_seed, sim]).generate_state(1)[0])


# =================================== EXPERIMENT SPEC ===================================
@dataclass(frozen=True)
class ExperimentSpec:
    experiment: ExperimentKind
    n_sims: int = 100
    n_regions: int = 100
    estimators: tuple = DEFAULT_ESTIMATORS
    master_seed: int = 0
    output_dir: str = "output"
    mode: str = "cu"
    permutations: int = 20
    inversion_draws: int = 250
    halton_skip: int = 1000
    dgp_draws: int = 1000
    grid_points: int = 50
    grid_upper: float = 10.0
    grid: tuple = None
    dgp_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "experiment", ExperimentKind(self.experiment))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.grid is None:
            defaults = {ExperimentKind.SHOCK_SWEEP: SHOCK_SD_GRID, ExperimentKind.COMMON_SWEEP: COMMON_PRODUCTS_GRID}
            object.__setattr__(self, "grid", defaults.get(self.experiment, ()))
        object.__setattr__(self, "grid", tuple(self.grid))
        if self.n_sims < 1:
            raise DomainError(f"an experiment needs at least one simulation, got {self.n_sims}")
        if self.experiment in (ExperimentKind.SHOCK_SWEEP, ExperimentKind.COMMON_SWEEP) and not self.grid:
            raise DomainError(f"the {self.experiment.value} experiment needs a non-empty grid")
        unknown = [name for name in self.estimators if name not in ESTIMATORS]
        if unknown or not self.estimators:
            raise DomainError(f"unknown or missing estimators: {unknown}")

    @classmethod
    def at_scale(cls, experiment, scale="full", **overrides):
        if scale not in SCALES:
            raise DomainError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
        return cls(experiment=experiment, **{**SCALES[scale], **overrides})

    def points(self):
        """``(label, DgpConfig overrides)`` for every experiment point, in output order."""
        if self.experiment is ExperimentKind.SHOCK_SWEEP:
            return [
                (f"shock_sd={value:g}", {"scenario": Scenario.SHOCK_SWEEP, "shock_sd": float(value)})
                for value in self.grid
            ]
        if self.experiment is ExperimentKind.COMMON_SWEEP:
            return [
                (f"common={int(value)}", {"scenario": Scenario.COMMON_PRODUCTS, "common_products": int(value)})
                for value in self.grid
            ]
        if self.experiment is ExperimentKind.BLISS:
            return [("bliss", {"scenario": Scenario.BLISS_POINT})]
        return [("baseline", {})]

    def dgp_config(self, sim, overrides):
        values = dict(n_regions=self.n_regions, dgp_draws=self.dgp_draws, seed=simulation_seed(self.master_seed, sim))
        values.update(self.dgp_overrides)
        values.update(overrides)
        return DgpConfig(**values)


# =================================== ONE SIMULATION ===================================
def _truth(config):
    truth = {"alpha": config.alpha_true}
    truth.update({f"sigma{index + 1}": value for index, value in enumerate(config.sigma_true)})
    return truth


def _estimate(spec, name, panel, draws, seed):
    family, instrument = ESTIMATORS[name]
    if family == "char":
        return estimate_char_iv(
            panel.period(2), instrument, draws, grid_points=spec.grid_points, grid_upper=spec.grid_upper
        )
    return estimate_recentered(
        panel,
        instrument,
        draws,
        mode=spec.mode,
        grid_points=spec.grid_points,
        grid_upper=spec.grid_upper,
        permutations=spec.permutations,
        seed=seed,
    )


def run_simulation(task):
    """Rows of the raw results file for one ``(spec, point, sim)`` task."""
    spec, label, overrides, sim = task
    config = spec.dgp_config(sim, overrides)
    truth = _truth(config)
    panel = simulate_panel(config)
    draws = ConsumerDraws.halton(count=spec.inversion_draws, dims=config.L1, skip=spec.halton_skip)
    base = {"point": label, "sim": sim, "seed": config.seed, "n_dropped": panel.n_dropped}
    rows = []
    for name in spec.estimators:
        try:
            result = _estimate(spec, name, panel, draws, config.seed)
        except ReciVError as exc:
            logger.warning("%s sim %d: %s failed: %s", label, sim, name, exc)
            failure = f"{exc.__class__.__name__}: {exc}"
            for parameter, value in truth.items():
                rows.append(
                    {
                        **base,
                        "estimator": name,
                        "parameter": parameter,
                        "estimate": np.nan,
                        "se": np.nan,
                        "truth": value,
                        "converged": False,
                        "failure": failure,
                    }
                )
            continue
        se = {}
        if result.converged:
            try:
                se = gmm_standard_errors(result, Clustering.BY_MARKET)
            except ReciVError as exc:
                logger.debug("%s sim %d: no standard errors for %s: %s", label, sim, name, exc)
        estimates = result.parameters()
        for parameter, value in truth.items():
            rows.append(
                {
                    **base,
                    "estimator": name,
                    "parameter": parameter,
                    "estimate": estimates[parameter],
                    "se": se.get(parameter, np.nan),
                    "truth": value,
                    "converged": result.converged,
                    "failure": result.failure or "",
                }
            )
    logger.info("%s sim %d done (%d dropped markets)", label, sim, panel.n_dropped)
    return rows


# =================================== SUMMARY ===================================
@dataclass
class SummaryTable:
    """Percentiles of converged estimates per (point, estimator, parameter)."""

    rows: list
    experiment: str = ""

    @classmethod
    def from_frame(cls, frame, experiment=""):
        rows = []
        if frame.empty:
            return cls(rows=rows, experiment=experiment)
        order = list(dict.fromkeys(frame["point"]))
        for (point, estimator, parameter), cell in frame.groupby(["point", "estimator", "parameter"], sort=False):
            converged = cell[cell["converged"].astype(bool)]
            values = converged["estimate"].to_numpy(dtype=np.float64)
            row = {
                "point": point,
                "estimator": estimator,
                "parameter": parameter,
                "truth": float(cell["truth"].iloc[0]),
                "n_converged": int(len(converged)),
                "n_failed": int(len(cell) - len(converged)),
                "mean": float(values.mean()) if values.size else None,
            }
            for percentile in PERCENTILES:
                row[f"p{percentile}"] = float(np.percentile(values, percentile)) if values.size else None
            rows.append(row)
        rows.sort(key=lambda row: (order.index(row["point"]), row["estimator"], row["parameter"]))
        return cls(rows=rows, experiment=experiment)

    def cell(self, point, estimator, parameter):
        for row in self.rows:
            if (row["point"], row["estimator"], row["parameter"]) == (point, estimator, parameter):
                return row
        return None

    @property
    def points(self):
        return list(dict.fromkeys(row["point"] for row in self.rows))

    def as_dict(self):
        return {"experiment": self.experiment, "rows": self.rows}

    def write(self, path):
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True))

    @classmethod
    def read(cls, path):
        values = json.loads(Path(path).read_text())
        return cls(rows=values["rows"], experiment=values.get("experiment", ""))


# =================================== DRIVER ===================================
def experiment_paths(spec):
    directory = Path(spec.output_dir)
    stem = spec.experiment.value
    return directory / f"{stem}_raw.csv", directory / f"{stem}_summary.json"


def run_experiment(spec, pool=None):
    """Run every (point, simulation) task, write the raw CSV and summary JSON.

    Failed estimations become rows with ``converged = False``; the run continues.
    Returns ``(summary, raw_frame)``.
    """
    tasks = [(spec, label, overrides, sim) for label, overrides in spec.points() for sim in range(spec.n_sims)]
    logger.info("running %s: %d tasks, estimators %s", spec.experiment.value, len(tasks), ", ".join(spec.estimators))
    mapper = pool.imap if pool is not None else map
    rows = []
    for done, task_rows in enumerate(mapper(run_simulation, tasks), start=1):
        rows.extend(task_rows)
        logger.info("%s: %d/%d simulations finished", spec.experiment.value, done, len(tasks))

    raw = pd.DataFrame(rows, columns=RAW_COLUMNS)
    raw_path, summary_path = experiment_paths(spec)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw.to_csv(raw_path, index=False, float_format="%.17g")
    summary = SummaryTable.from_frame(raw, experiment=spec.experiment.value)
    summary.write(summary_path)
    failed = int((~raw["converged"].astype(bool)).sum()) if not raw.empty else 0
    logger.info("%s finished: %d rows, %d failed estimates", spec.experiment.value, len(raw), failed)
    return summary, raw

