import logging
from pathlib import Path

from apps.demand.mixedlogit import ConsumerDraws, Theta
from apps.simulation.panels import read_market_column, read_panel
from core.commands import ConfigurableCommand

from ...forms import InstrumentsForm
from ...recentered import estimate_pass_through
from ...sets import build_instrument_set

logger = logging.getLogger(__name__)


class Command(ConfigurableCommand):
    help = "Build an instrument set for a panel CSV and write it keyed by (region, period, product, column)."
    form_class = InstrumentsForm
    settings_defaults = {"permutations": "PERMUTATIONS", "draws": "INVERSION_DRAWS"}

    def add_options(self, parser):
        parser.add_argument("--panel", help="panel CSV written by the simulate command")
        parser.add_argument("--out", help="instrument CSV to write")
        parser.add_argument("--kind", choices=["blp", "gh-quad", "gh-local", "ssiv", "fiv"])
        parser.add_argument("--permutations", type=int, help="shock permutations for the formula IV")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--alpha-check", type=float)
        parser.add_argument("--sigma-check", help="preliminary random-coefficient SDs, e.g. '1,1'")
        parser.add_argument("--pi-check", type=float, help="pass-through; estimated from the panel when omitted")
        parser.add_argument("--shock-means", help="panel column holding E[g | x, q]")
        parser.add_argument("--draws", type=int, help="Halton draws used to invert shares")

    def run(self, panel, out, kind, permutations, seed, alpha_check, sigma_check, pi_check, shock_means, draws):
        data = read_panel(panel)
        if kind.recentered:
            markets = data.paired_markets()
        else:
            markets = data.period(2)
        means = read_market_column(panel, shock_means, markets) if shock_means else None

        options = {"kappa": None}
        if kind.recentered:
            if pi_check is None:
                pi_check = estimate_pass_through(markets, shock_means=means).pi_check
            reciv = self.reciv_settings()
            options = dict(
                theta_check=Theta(alpha=alpha_check, sigma=sigma_check),
                pi_check=pi_check,
                draws=ConsumerDraws.halton(count=draws, dims=len(sigma_check), skip=reciv.get("HALTON_SKIP", 1000)),
                permutations=permutations,
                seed=seed,
                shock_means=means,
            )
        instruments = build_instrument_set(markets, kind, **options)
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        instruments.to_frame().to_csv(out, index=False, float_format="%.17g")
        logger.info("instrument meta: %s", instruments.meta)
        self.stdout.write(
            self.style.SUCCESS(
                f"wrote {instruments.n_columns} columns of {kind.value} instruments for {len(markets)} markets to {out}"
            )
        )
