"""Panel CSV files and their truth sidecars.

One row per product-market: ``region, period, product, x1..xL, price, share,
outside_share, g, dropped_flag`` and, for nested logit panels, ``nest``. Dropped
markets keep their characteristics and shocks with empty prices and shares.
"""

import json
import logging
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from apps.demand.exceptions import DomainError, ShapeMismatchError
from apps.demand.mixedlogit import Market
from apps.demand.nestedlogit import NestedMarket

from .dgp import DgpConfig, DroppedMarket, SimulatedPanel, link_lagged

logger = logging.getLogger(__name__)

KEY_COLUMNS = ["region", "period", "product"]
VALUE_COLUMNS = ["price", "share", "outside_share", "g", "dropped_flag"]


def truth_path(path):
    path = Path(path)
    return path.with_name(f"{path.stem}.truth.json")


def _all_markets(panel):
    seen, ordered = set(), []
    for market in panel.markets:
        for candidate in (market.lagged, market):
            if candidate is not None and candidate.market_id not in seen:
                seen.add(candidate.market_id)
                ordered.append(candidate)
    return sorted(ordered, key=lambda market: market.market_id)


def _frame(market_id, x1, price, share, outside, g, dropped, nest=None):
    J = len(g)
    frame = pd.DataFrame(
        {
            "region": market_id[0],
            "period": market_id[1],
            "product": np.arange(1, J + 1),
        }
    )
    for ell in range(x1.shape[1]):
        frame[f"x{ell + 1}"] = x1[:, ell]
    frame["price"] = price
    frame["share"] = share
    frame["outside_share"] = outside
    frame["g"] = g
    frame["dropped_flag"] = dropped
    if nest is not None:
        frame["nest"] = nest
    return frame


def panel_frame(panel):
    """Long data frame of every surviving and dropped market, sorted by key."""
    frames = []
    for market in _all_markets(panel):
        frames.append(
            _frame(
                market.market_id,
                market.x1,
                market.p,
                market.s,
                market.s0,
                market.g,
                False,
                nest=getattr(market, "nest", None),
            )
        )
    for dropped in getattr(panel, "dropped_markets", []):
        if dropped.g is None:
            continue
        J = len(dropped.g)
        frames.append(_frame(dropped.market_id, dropped.x1, np.nan, np.nan, np.nan, dropped.g, True))
        logger.debug("writing dropped market %s with %d products", dropped.market_id, J)
    if not frames:
        return pd.DataFrame(columns=KEY_COLUMNS + VALUE_COLUMNS)
    return pd.concat(frames, ignore_index=True).sort_values(KEY_COLUMNS, kind="mergesort").reset_index(drop=True)


def _truth_payload(panel, model):
    truth = panel.truth
    if truth is None:
        values = None
    elif hasattr(truth, "as_dict"):
        values = truth.as_dict()
    elif is_dataclass(truth):
        values = asdict(truth)
    else:
        values = dict(truth)
    return {
        "model": model,
        "truth": values,
        "dropped_markets": [
            {"market_id": list(dropped.market_id), "reason": dropped.reason}
            for dropped in getattr(panel, "dropped_markets", [])
        ],
    }


def write_panel(panel, path, model="mixed"):
    """Write the panel CSV and its ``<stem>.truth.json`` sidecar; returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = panel_frame(panel)
    frame.to_csv(path, index=False, float_format="%.17g")
    sidecar = truth_path(path)
    sidecar.write_text(json.dumps(_truth_payload(panel, model), indent=2, sort_keys=True))
    logger.info("wrote %d rows to %s", len(frame), path)
    return path, sidecar


def _characteristic_columns(frame):
    columns = [column for column in frame.columns if column.startswith("x") and column[1:].isdigit()]
    return sorted(columns, key=lambda column: int(column[1:]))


def read_truth(path):
    sidecar = truth_path(path)
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())


def read_panel(path):
    """Read a panel CSV back into markets; period-t markets get their period-(t-1) market as ``lagged``."""
    path = Path(path)
    if not path.exists():
        raise DomainError(f"panel file {path} does not exist")
    frame = pd.read_csv(path)
    missing = [column for column in KEY_COLUMNS + VALUE_COLUMNS if column not in frame.columns]
    if missing:
        raise ShapeMismatchError(f"panel file {path} lacks columns {missing}")
    x_columns = _characteristic_columns(frame)
    nested = "nest" in frame.columns

    markets, dropped = [], []
    for (region, period), rows in frame.sort_values(KEY_COLUMNS).groupby(["region", "period"], sort=True):
        market_id = (int(region), int(period))
        x1 = rows[x_columns].to_numpy(dtype=np.float64)
        g = rows["g"].to_numpy(dtype=np.float64)
        if rows["dropped_flag"].astype(bool).any():
            dropped.append(DroppedMarket(market_id=market_id, reason="dropped at simulation", x1=x1, g=g))
            continue
        fields = dict(
            market_id=market_id,
            x=np.column_stack([np.ones(len(rows)), x1]),
            x1=x1,
            p=rows["price"].to_numpy(dtype=np.float64),
            s=rows["share"].to_numpy(dtype=np.float64),
            s0=float(rows["outside_share"].iloc[0]),
            g=g,
        )
        if nested:
            markets.append(NestedMarket(nest=rows["nest"].to_numpy(), **fields))
        else:
            markets.append(Market(**fields))
    link_lagged(markets)

    payload = read_truth(path) or {}
    truth = payload.get("truth")
    if truth is not None and payload.get("model", "mixed") == "mixed":
        truth = DgpConfig.from_dict(truth)
    logger.info("read %d markets (%d dropped) from %s", len(markets), len(dropped), path)
    return SimulatedPanel(markets=markets, dropped_markets=dropped, truth=truth)


def read_market_column(path, column, markets):
    """Values of an extra CSV column, one array per market in ``markets`` order."""
    frame = pd.read_csv(path)
    if column not in frame.columns:
        raise ShapeMismatchError(f"panel file {path} has no column {column!r}")
    grouped = {
        (int(region), int(period)): rows.sort_values("product")[column].to_numpy(dtype=np.float64)
        for (region, period), rows in frame.groupby(["region", "period"])
    }
    return [grouped[market.market_id] for market in markets]
