import logging

import numpy as np
import pandas as pd

from apps.demand.exceptions import DomainError

from .harness import DEFAULT_ESTIMATORS, PERCENTILES, ExperimentKind

logger = logging.getLogger(__name__)

FIGURE_COLUMNS = ["figure", "point", "estimator", "parameter", "percentile", "value", "truth", "n_converged"]
FIGURE_PARAMETERS = ("alpha", "sigma1", "sigma2")
GAP = "missing"


def _figure_number(figure):
    if isinstance(figure, ExperimentKind):
        return figure.figure
    if figure not in (1, 2, 3, 4):
        raise DomainError(f"figure must be one of 1, 2, 3, 4, got {figure!r}")
    return int(figure)


def emit_figure_data(table, figure, estimators=DEFAULT_ESTIMATORS, path=None):
    """Long-format box-plot data, one row per (point, estimator, parameter, percentile).

    An estimator with no rows at a point gets a single gap row per parameter with an
    empty value. An empty table yields only the header.
    """
    number = _figure_number(figure)
    rows = []
    for point in table.points:
        for estimator in estimators:
            for parameter in FIGURE_PARAMETERS:
                cell = table.cell(point, estimator, parameter)
                if cell is None:
                    logger.warning("figure %d: no %s rows for %s at %s", number, parameter, estimator, point)
                    rows.append([number, point, estimator, parameter, GAP, np.nan, np.nan, 0])
                    continue
                for percentile in PERCENTILES:
                    value = cell[f"p{percentile}"]
                    rows.append(
                        [
                            number,
                            point,
                            estimator,
                            parameter,
                            f"p{percentile}",
                            np.nan if value is None else value,
                            cell["truth"],
                            cell["n_converged"],
                        ]
                    )
    frame = pd.DataFrame(rows, columns=FIGURE_COLUMNS)
    if path is not None:
        frame.to_csv(path, index=False, float_format="%.17g")
        logger.info("figure %d data written to %s (%d rows)", number, path, len(frame))
    return frame
