import logging
from multiprocessing import Pool

from apps.demand.nestedlogit import NestedDgpConfig, simulate_nested_panel
from core.commands import ConfigurableCommand

from ...dgp import DgpConfig, simulate_panel
from ...forms import SimulateForm
from ...panels import write_panel

logger = logging.getLogger(__name__)


class Command(ConfigurableCommand):
    help = "Simulate a two-period panel of markets and write it as CSV with a truth sidecar."
    form_class = SimulateForm
    settings_defaults = {"workers": "WORKERS", "draws": "DGP_DRAWS"}

    def add_options(self, parser):
        parser.add_argument("--out", help="panel CSV to write")
        parser.add_argument("--model", choices=["mixed", "nested"])
        parser.add_argument("--scenario", choices=["baseline", "shock-sweep", "common-products", "bliss"])
        parser.add_argument("--regions", type=int)
        parser.add_argument("--products", type=int)
        parser.add_argument("--shock-sd", type=float)
        parser.add_argument("--common", type=int, help="products sharing region 1's characteristics")
        parser.add_argument("--draws", type=int, help="consumer draws used to compute shares")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--workers", type=int)

    def run(self, out, model, scenario, regions, products, shock_sd, common, draws, seed, workers):
        if model == "nested":
            panel = simulate_nested_panel(NestedDgpConfig(n_markets=regions, shock_sd=shock_sd, seed=seed))
        else:
            config = DgpConfig(
                n_regions=regions,
                n_products=products,
                shock_sd=shock_sd,
                dgp_draws=draws,
                seed=seed,
                scenario=scenario,
                common_products=common,
            )
            if workers > 1:
                with Pool(workers) as pool:
                    panel = simulate_panel(config, pool=pool)
            else:
                panel = simulate_panel(config)
        path, sidecar = write_panel(panel, out, model=model)
        dropped = len(getattr(panel, "dropped_markets", []))
        self.stdout.write(self.style.SUCCESS(f"wrote {path} and {sidecar} ({dropped} dropped markets)"))
