"""`simulate`: DgpParams JSON -> long CSV panel."""

import argparse
import logging

from app.commands import add_run_flags, emit
from app.core.errors import ConfigurationError
from app.services.panel_io import FLOAT_FORMAT, load_params, load_run_config, panel_frame
from app.services.sem_dgp import simulate


log = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("simulate", help="draw a synthetic panel from DGP parameters")
    p.add_argument("--params", default=None, help="DgpParams JSON file")
    p.add_argument("--config", default=None, help="RunConfig JSON file (uses params_file and seed)")
    add_run_flags(p)
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    seed = 0
    if args.params:
        params = load_params(args.params)
    elif args.config:
        cfg = load_run_config(args.config)
        if cfg.params_file is None:
            raise ConfigurationError("config has no params_file")
        params = load_params(cfg.params_file)
        seed = cfg.seed
    else:
        raise ConfigurationError("simulate needs --params or --config")
    if args.seed is not None:
        seed = args.seed
    panel = simulate(params, seed)
    text = panel_frame(panel).to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    emit({"panel.csv": text}, args.out, "panel.csv")
    log.info("simulate_done", extra={"n": panel.n, "n1": panel.n1, "seed": seed})
    return 0
